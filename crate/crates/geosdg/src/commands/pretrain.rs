//! `pretrain`: the self-distillation training loop with checkpointing,
//! a CSV loss log, and bit-exact resume.
//!
//! Batch composition and augmentation randomness are pure functions of
//! `(seed, step)`, so resuming from a checkpoint at step k continues
//! with exactly the tiles and views the uninterrupted run would have
//! used. Per-tile gradient terms are computed in parallel and reduced
//! in tile order, which keeps the arithmetic identical to the
//! sequential path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use geosdg_core::dino::{
    apply_step, tile_step_terms, view_seed, AugmentSpec, DinoConfig, DinoState, TileStepTerms,
    STRICT_BATCH_RANGE,
};
use geosdg_core::ingest::{compute_stats, filter_cloud, standardize, Tile};
use geosdg_core::numerics::Tensor;
use geosdg_core::rng::Rng;
use geosdg_core::vit::ModelConfig;

use crate::commands::load_manifest_tiles;
use crate::errors::{CmdError, CmdResult};
use crate::formats::checkpoint::{load_checkpoint, write_checkpoint, Checkpoint, TrainerState};
use crate::formats::csvio::{loss_log_row, read_manifest, LOSS_LOG_HEADER};
use crate::log;
use crate::write_atomic;

pub struct PretrainArgs {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub dino: DinoConfig,
    pub max_cloud: f32,
    pub save_every: u64,
    pub resume: Option<PathBuf>,
    pub allow_any_batch: bool,
}

/// Deterministic dataset addressing: global sample index -> tile index
/// through a per-epoch seeded permutation.
struct Sampler {
    n: usize,
    seed: u64,
    perms: BTreeMap<u64, Vec<usize>>,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            n,
            seed,
            perms: BTreeMap::new(),
        }
    }

    fn tile_for(&mut self, global_index: u64) -> usize {
        let epoch = global_index / self.n as u64;
        let pos = (global_index % self.n as u64) as usize;
        let seed = self.seed;
        let n = self.n;
        let perm = self
            .perms
            .entry(epoch)
            .or_insert_with(|| Rng::derive(seed, "shuffle", epoch).permutation(n));
        perm[pos]
    }
}

fn checkpoint_of(model: &ModelConfig, state: &DinoState) -> Checkpoint {
    Checkpoint {
        config: model.clone(),
        student: state.student.clone(),
        trainer: Some(TrainerState {
            teacher: state.teacher.clone(),
            moments: state.moments.clone(),
            center: state.center.clone(),
            step: state.step,
        }),
    }
}

fn init_or_resume(
    model: &ModelConfig,
    dino: &DinoConfig,
    resume: Option<&Path>,
) -> CmdResult<DinoState> {
    match resume {
        None => DinoState::init(model, dino.clone()).map_err(CmdError::from),
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if &ckpt.config != model {
                return Err(CmdError::config(format!(
                    "checkpoint model config {:?} does not match the requested {:?}",
                    ckpt.config, model
                )));
            }
            let trainer = ckpt.trainer.ok_or_else(|| {
                CmdError::config(format!(
                    "{} has no trainer state; cannot resume from an inference checkpoint",
                    path.display()
                ))
            })?;
            log(format!(
                "pretrain: resuming from {} at step {}",
                path.display(),
                trainer.step
            ));
            Ok(DinoState {
                config: dino.clone(),
                student: ckpt.student,
                teacher: trainer.teacher,
                center: trainer.center,
                moments: trainer.moments,
                step: trainer.step,
            })
        }
    }
}

/// The training loop proper: steps, logging, periodic checkpoints.
/// `stop_after` simulates an interruption at that step while keeping
/// the full-run schedules (tests use it to exercise resume).
fn training_loop(
    state: &mut DinoState,
    model: &ModelConfig,
    rasters: &[Tensor<f32>],
    out_dir: &Path,
    save_every: u64,
    stop_after: Option<u64>,
) -> CmdResult<()> {
    if rasters.is_empty() {
        return Err(CmdError::ingest("training set is empty"));
    }
    let spec = AugmentSpec::desk(model.image_size);
    let mut sampler = Sampler::new(rasters.len(), state.config.seed);
    let batch = state.config.batch_size;
    let mut log_rows = String::from(LOSS_LOG_HEADER);
    log_rows.push('\n');
    let log_path = out_dir.join("loss_log.csv");

    while state.step < stop_after.unwrap_or(u64::MAX).min(state.config.total_steps) {
        let step = state.step;
        let tile_indices: Vec<usize> = (0..batch)
            .map(|i| sampler.tile_for(step * batch as u64 + i as u64))
            .collect();

        let terms: Vec<CmdResult<TileStepTerms>> = tile_indices
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                tile_step_terms(
                    &state.student,
                    &state.teacher,
                    &state.center,
                    &state.config,
                    &spec,
                    &rasters[t],
                    view_seed(state.config.seed, step, i),
                )
                .map_err(CmdError::from)
            })
            .collect();
        let terms: Vec<TileStepTerms> = terms.into_iter().collect::<CmdResult<_>>()?;

        let stats = apply_step(state, &terms)?;
        log_rows.push_str(&loss_log_row(
            stats.step,
            stats.loss,
            stats.lr,
            stats.wd,
            stats.lambda,
            stats.collapse_metric,
        ));
        if stats.collapse_metric < state.config.collapse_floor {
            log(format!(
                "warning: collapse metric {:.6} below floor {:.6} at step {}",
                stats.collapse_metric, state.config.collapse_floor, stats.step
            ));
        }

        if save_every > 0 && state.step.is_multiple_of(save_every) {
            let path = out_dir.join(format!("checkpoint_step{:06}.gsdg", state.step));
            write_checkpoint(&path, &checkpoint_of(model, state))?;
            write_atomic(&log_path, log_rows.as_bytes())?;
            log(format!("pretrain: saved {}", path.display()));
        }
    }

    write_checkpoint(
        &out_dir.join("checkpoint_final.gsdg"),
        &checkpoint_of(model, state),
    )?;
    write_atomic(&log_path, log_rows.as_bytes())?;
    Ok(())
}

fn prepare_tiles(args: &PretrainArgs) -> CmdResult<Vec<Tile>> {
    let manifest = read_manifest(&args.manifest)?;
    let kept = filter_cloud(&manifest, args.max_cloud)?;
    log(format!(
        "pretrain: manifest {} tiles, {} after cloud filter at {}%",
        manifest.len(),
        kept.len(),
        args.max_cloud
    ));
    for ((source, round), count) in geosdg_core::ingest::manifest_stats(&kept) {
        log(format!(
            "pretrain: retrieved source={} round={round} images={count}",
            source.as_str()
        ));
    }
    if kept.is_empty() {
        return Err(CmdError::ingest("no tiles left after cloud filtering"));
    }
    let tiles = load_manifest_tiles(
        &args.manifest,
        &kept,
        args.model.bands,
        Some(args.model.image_size),
    )?;
    let stats = compute_stats(&tiles)?;
    tiles
        .iter()
        .map(|t| standardize(t, &stats).map_err(CmdError::from))
        .collect()
}

pub fn run(args: &PretrainArgs) -> CmdResult<()> {
    if !args.allow_any_batch {
        let (lo, hi) = STRICT_BATCH_RANGE;
        if !(lo..=hi).contains(&args.dino.batch_size) {
            return Err(CmdError::config(format!(
                "batch size {} outside the training protocol range {lo}..={hi} \
                 (pass --allow-any-batch to override)",
                args.dino.batch_size
            )));
        }
    }
    args.dino.validate()?;
    let tiles = prepare_tiles(args)?;
    let rasters: Vec<Tensor<f32>> = tiles.into_iter().map(|t| t.raster).collect();
    let mut state = init_or_resume(&args.model, &args.dino, args.resume.as_deref())?;
    training_loop(
        &mut state,
        &args.model,
        &rasters,
        &args.out_dir,
        args.save_every,
        None,
    )?;
    log(format!(
        "pretrain: finished at step {} ({} total)",
        state.step, args.dino.total_steps
    ));
    Ok(())
}

/// Library entry for tests: trains on pre-standardized rasters with
/// the same loop the CLI uses.
pub fn train_in_memory(
    model: &ModelConfig,
    dino: &DinoConfig,
    rasters: &[Tensor<f32>],
    out_dir: &Path,
    resume: Option<&Path>,
    save_every: u64,
    stop_after: Option<u64>,
) -> CmdResult<DinoState> {
    let mut state = init_or_resume(model, dino, resume)?;
    training_loop(&mut state, model, rasters, out_dir, save_every, stop_after)?;
    Ok(state)
}
