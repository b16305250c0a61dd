//! `embed`: frozen-encoder feature extraction over a manifest, one
//! embedding row per tile in sorted tile-id order.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use geosdg_core::ingest::{compute_stats, join_labels, standardize, LabeledTile};
use geosdg_core::knn::Task;
use geosdg_core::vit::{forward, VitParams};

use crate::commands::load_manifest_tiles;
use crate::errors::{CmdError, CmdResult};
use crate::formats::checkpoint::{load_checkpoint, Checkpoint};
use crate::formats::csvio::{read_manifest, read_survey, write_embeddings, EmbeddingOut};
use crate::log;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Network {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pool {
    Cls,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskSel {
    PipedWater,
    Sewage,
    Both,
}

impl TaskSel {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TaskSel::PipedWater => vec![Task::PipedWater],
            TaskSel::Sewage => vec![Task::Sewage],
            TaskSel::Both => vec![Task::PipedWater, Task::Sewage],
        }
    }
}

pub struct EmbedArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub survey: Option<PathBuf>,
    pub task: TaskSel,
    pub network: Network,
    pub pool: Pool,
    pub join_radius_m: f64,
}

/// Picks teacher or student parameters; a plain checkpoint only
/// carries the student.
pub fn select_network(ckpt: &Checkpoint, network: Network) -> VitParams<f32> {
    match (network, &ckpt.trainer) {
        (Network::Teacher, Some(tr)) => tr.teacher.clone(),
        (Network::Teacher, None) => {
            log("embed: plain checkpoint has no teacher; using student parameters");
            ckpt.student.clone()
        }
        (Network::Student, _) => ckpt.student.clone(),
    }
}

pub fn run(args: &EmbedArgs) -> CmdResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let params = select_network(&ckpt, args.network);
    let config = &ckpt.config;

    let manifest = read_manifest(&args.manifest)?;
    let mut records: Vec<_> = manifest.records().to_vec();
    records.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let sorted = geosdg_core::ingest::Manifest::new(records)?;

    let tiles =
        load_manifest_tiles(&args.manifest, &sorted, config.bands, Some(config.image_size))?;
    let standardized = if tiles.is_empty() {
        tiles
    } else {
        let stats = compute_stats(&tiles)?;
        tiles
            .iter()
            .map(|t| standardize(t, &stats))
            .collect::<Result<_, _>>()
            .map_err(CmdError::from)?
    };

    let embeddings: Vec<Vec<f32>> = standardized
        .par_iter()
        .map(|t| {
            let out = forward(&params, &t.raster)?;
            Ok(match args.pool {
                Pool::Cls => out.embedding.into_data(),
                Pool::Mean => out.mean_embedding.into_data(),
            })
        })
        .collect::<Result<_, geosdg_core::Error>>()
        .map_err(CmdError::from)?;

    // labels come from the survey join when one is supplied
    let labels: BTreeMap<String, LabeledTile> = match &args.survey {
        None => BTreeMap::new(),
        Some(path) => {
            let survey = read_survey(path)?;
            let report = join_labels(&sorted, &survey, args.join_radius_m)?;
            if !report.skipped.is_empty() {
                log(format!(
                    "embed: {} tiles had no survey label",
                    report.skipped.len()
                ));
            }
            report
                .labeled
                .into_iter()
                .map(|lt| (lt.tile_id.clone(), lt))
                .collect()
        }
    };

    for task in args.task.tasks() {
        let rows: Vec<EmbeddingOut> = standardized
            .iter()
            .zip(&embeddings)
            .map(|(tile, e)| {
                let label = labels.get(&tile.tile_id).map(|lt| match task {
                    Task::PipedWater => lt.piped_water,
                    Task::Sewage => lt.sewage,
                });
                EmbeddingOut {
                    row_id: &tile.tile_id,
                    task,
                    label,
                    embedding: e,
                }
            })
            .collect();
        let out = args
            .out_dir
            .join(format!("embeddings_{}.csv", task.as_str()));
        write_embeddings(&out, config.dim, &rows)?;
        log(format!("embed: wrote {} rows to {}", rows.len(), out.display()));
    }
    Ok(())
}
