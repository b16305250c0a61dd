//! Command-line surface. Every flag can also come from the optional
//! `--config` key=value file; explicit flags win.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use geosdg_core::dino::DinoConfig;
use geosdg_core::ingest::SynthParams;

use crate::commands::embed::{Network, Pool, TaskSel};
use crate::commands::{aggregate, attn_viz, embed, infer, knn_eval, pretrain, synth, validate};
use crate::config::{ConfigFile, Preset};
use crate::errors::{CmdError, CmdResult};

#[derive(Parser, Debug)]
#[command(
    name = "geosdg",
    about = "Infers piped-water and sewage access from satellite tiles: \
             self-supervised pre-training, k-NN evaluation, and \
             population-weighted national aggregation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic tile dataset with survey labels
    SynthData(SynthCmd),
    /// Self-supervised pre-training over a tile manifest
    Pretrain(PretrainCmd),
    /// Extract frozen embeddings for every manifest tile
    Embed(EmbedCmd),
    /// Sweep k over a labeled embedding set and report metrics
    KnnEval(KnnEvalCmd),
    /// Classify query embeddings and fuse per-location labels
    Infer(InferCmd),
    /// Population-weighted national estimates (and urban/rural rates)
    Aggregate(AggregateCmd),
    /// Compare national estimates against official statistics
    Validate(ValidateCmd),
    /// Export per-head CLS attention grids for one layer
    AttnViz(AttnVizCmd),
}

#[derive(Parser, Debug)]
pub struct SynthCmd {
    /// Output directory (tiles/, manifest.csv, survey.csv)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Random seed (mandatory; there is no wall-clock default)
    #[arg(long)]
    pub seed: u64,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of tiles [default: 100]
    #[arg(long)]
    pub n_tiles: Option<usize>,
    /// Served-class fraction [default: 0.5]
    #[arg(long)]
    pub balance: Option<f64>,
    /// Label-flip probability [default: 0]
    #[arg(long)]
    pub label_noise: Option<f64>,
    /// Tile side in pixels [default: 32]
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Band count [default: 3]
    #[arg(long)]
    pub bands: Option<usize>,
}

impl SynthCmd {
    pub fn run(&self) -> CmdResult<()> {
        let cfg = ConfigFile::load(self.config.as_deref())?;
        let params = SynthParams {
            n_tiles: cfg.resolve(self.n_tiles, "n_tiles", 100)?,
            balance: cfg.resolve(self.balance, "balance", 0.5)?,
            label_noise: cfg.resolve(self.label_noise, "label_noise", 0.0)?,
            image_size: cfg.resolve(self.image_size, "image_size", 32)?,
            bands: cfg.resolve(self.bands, "bands", 3)?,
            seed: self.seed,
        };
        synth::run(&synth::SynthArgs {
            out_dir: self.out_dir.clone(),
            params,
        })
    }
}

#[derive(Parser, Debug)]
pub struct PretrainCmd {
    /// Tile manifest CSV
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Random seed (mandatory; there is no wall-clock default)
    #[arg(long)]
    pub seed: u64,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset [default: desk]
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Training steps [default: 300]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Batch size; strict mode accepts 16..=32 [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Accept batch sizes outside the 16..=32 protocol range
    #[arg(long)]
    pub allow_any_batch: bool,
    /// Cloud-cover ceiling in percent [default: 10]
    #[arg(long)]
    pub max_cloud: Option<f32>,
    /// Checkpoint interval in steps; 0 saves only the final [default: 100]
    #[arg(long)]
    pub save_every: Option<u64>,
    /// Resume from a trainer checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the preset band count
    #[arg(long)]
    pub bands: Option<usize>,
    /// Override the preset image size
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Collapse-metric warning floor [default: 1e-4]
    #[arg(long)]
    pub collapse_floor: Option<f64>,
}

impl PretrainCmd {
    pub fn run(&self) -> CmdResult<()> {
        let cfg = ConfigFile::load(self.config.as_deref())?;
        let preset = cfg.resolve_opt(self.preset, "preset")?.unwrap_or(Preset::Desk);
        let model = preset.model(
            cfg.resolve_opt(self.bands, "bands")?,
            cfg.resolve_opt(self.image_size, "image_size")?,
        )?;
        let dino = DinoConfig {
            seed: self.seed,
            total_steps: cfg.resolve(self.steps, "steps", 300)?,
            batch_size: cfg.resolve(self.batch_size, "batch_size", 16)?,
            collapse_floor: cfg.resolve(self.collapse_floor, "collapse_floor", 1e-4)?,
            ..DinoConfig::default()
        };
        pretrain::run(&pretrain::PretrainArgs {
            manifest: self.manifest.clone(),
            out_dir: self.out_dir.clone(),
            model,
            dino,
            max_cloud: cfg.resolve(self.max_cloud, "max_cloud", 10.0)?,
            save_every: cfg.resolve(self.save_every, "save_every", 100)?,
            resume: self.resume.clone(),
            allow_any_batch: self.allow_any_batch,
        })
    }
}

#[derive(Parser, Debug)]
pub struct EmbedCmd {
    /// Model checkpoint (GSDG)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tile manifest CSV
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (embeddings_<task>.csv)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Survey CSV for labels (omit for unlabeled embeddings)
    #[arg(long)]
    pub survey: Option<PathBuf>,
    /// Task selector [default: both]
    #[arg(long, value_enum)]
    pub task: Option<TaskSel>,
    /// Which network to embed with [default: teacher]
    #[arg(long, value_enum)]
    pub network: Option<Network>,
    /// Embedding choice: post-norm CLS token or mean of patch tokens
    /// [default: cls]
    #[arg(long, value_enum)]
    pub pool: Option<Pool>,
    /// Survey join radius in meters [default: 1000]
    #[arg(long)]
    pub join_radius_m: Option<f64>,
}

impl EmbedCmd {
    pub fn run(&self) -> CmdResult<()> {
        let cfg = ConfigFile::load(self.config.as_deref())?;
        embed::run(&embed::EmbedArgs {
            checkpoint: self.checkpoint.clone(),
            manifest: self.manifest.clone(),
            out_dir: self.out_dir.clone(),
            survey: self.survey.clone(),
            task: self.task.unwrap_or(TaskSel::Both),
            network: self.network.unwrap_or(Network::Teacher),
            pool: self.pool.unwrap_or(Pool::Cls),
            join_radius_m: cfg.resolve(self.join_radius_m, "join_radius_m", 1000.0)?,
        })
    }
}

#[derive(Parser, Debug)]
pub struct KnnEvalCmd {
    /// Labeled embeddings CSV to split with --split
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Pre-split training embeddings (with --validation)
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Pre-split validation embeddings (with --train)
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Output sweep CSV path
    #[arg(long)]
    pub out: PathBuf,
    /// Random seed for the split [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training fraction of the split [default: 0.7]
    #[arg(long)]
    pub split: Option<f64>,
    /// Comma-separated k values [default: 5,10,50,100,200]
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// L2-normalize embeddings before distances
    #[arg(long)]
    pub normalize: bool,
}

impl KnnEvalCmd {
    pub fn run(&self) -> CmdResult<()> {
        let cfg = ConfigFile::load(self.config.as_deref())?;
        let ks = match &self.ks {
            Some(ks) => ks.clone(),
            None => geosdg_core::knn::DEFAULT_KS.to_vec(),
        };
        knn_eval::run(&knn_eval::KnnEvalArgs {
            embeddings: self.embeddings.clone(),
            train: self.train.clone(),
            validation: self.validation.clone(),
            split: cfg.resolve(self.split, "split", 0.7)?,
            seed: cfg.resolve(self.seed, "seed", 0)?,
            ks,
            normalize: self.normalize,
            out: self.out.clone(),
        })
        .map(|_| ())
    }
}

#[derive(Parser, Debug)]
pub struct InferCmd {
    /// Labeled index embeddings CSV
    #[arg(long)]
    pub index: PathBuf,
    /// Query embeddings CSV
    #[arg(long)]
    pub queries: PathBuf,
    /// Manifest CSV linking query tiles to locations
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (locations_<task>.csv)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Neighborhood size [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// L2-normalize embeddings before distances
    #[arg(long)]
    pub normalize: bool,
}

impl InferCmd {
    pub fn run(&self) -> CmdResult<()> {
        let cfg = ConfigFile::load(self.config.as_deref())?;
        infer::run(&infer::InferArgs {
            index: self.index.clone(),
            queries: self.queries.clone(),
            manifest: self.manifest.clone(),
            k: cfg.resolve(self.k, "k", 5)?,
            normalize: self.normalize,
            out_dir: self.out_dir.clone(),
        })
    }
}

#[derive(Parser, Debug)]
pub struct AggregateCmd {
    /// Per-location label CSVs (repeatable, one per task)
    #[arg(long, required = true)]
    pub locations: Vec<PathBuf>,
    /// Population cell CSV (lat,lon,population,country)
    #[arg(long)]
    pub population: PathBuf,
    /// Output directory (country_estimates.csv, coverage.csv)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cell-to-location assignment radius in km [default: 5]
    #[arg(long)]
    pub radius_km: Option<f64>,
    /// Survey CSV; when given, urban_rural.csv is also written
    #[arg(long)]
    pub survey: Option<PathBuf>,
}

impl AggregateCmd {
    pub fn run(&self) -> CmdResult<()> {
        let cfg = ConfigFile::load(self.config.as_deref())?;
        aggregate::run(&aggregate::AggregateArgs {
            locations: self.locations.clone(),
            population: self.population.clone(),
            radius_km: cfg.resolve(self.radius_km, "radius_km", 5.0)?,
            survey: self.survey.clone(),
            out_dir: self.out_dir.clone(),
        })
    }
}

#[derive(Parser, Debug)]
pub struct ValidateCmd {
    /// Country estimates CSV from `aggregate`
    #[arg(long)]
    pub model: PathBuf,
    /// Official statistics CSV (country,year,piped_pct,sewage_pct)
    #[arg(long)]
    pub official: PathBuf,
    /// Output directory (validation.csv, scatter.csv)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Population cells for weighting and bubble sizes
    #[arg(long)]
    pub population: Option<PathBuf>,
}

impl ValidateCmd {
    pub fn run(&self) -> CmdResult<()> {
        validate::run(&validate::ValidateArgs {
            model: self.model.clone(),
            official: self.official.clone(),
            population: self.population.clone(),
            out_dir: self.out_dir.clone(),
        })
    }
}

#[derive(Parser, Debug)]
pub struct AttnVizCmd {
    /// Model checkpoint (GSDG)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tile file (GTIL)
    #[arg(long)]
    pub tile: PathBuf,
    /// Transformer layer to visualize
    #[arg(long)]
    pub layer: usize,
    /// Output directory (attn_layer<L>_head<H>.csv per head)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Optional key=value config file; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which network to visualize [default: teacher]
    #[arg(long, value_enum)]
    pub network: Option<Network>,
}

impl AttnVizCmd {
    pub fn run(&self) -> CmdResult<()> {
        attn_viz::run(&attn_viz::AttnVizArgs {
            checkpoint: self.checkpoint.clone(),
            tile: self.tile.clone(),
            layer: self.layer,
            network: self.network.unwrap_or(Network::Teacher),
            out_dir: self.out_dir.clone(),
        })
    }
}

pub fn dispatch(cli: &Cli) -> CmdResult<()> {
    match &cli.command {
        Command::SynthData(c) => c.run(),
        Command::Pretrain(c) => c.run(),
        Command::Embed(c) => c.run(),
        Command::KnnEval(c) => c.run(),
        Command::Infer(c) => c.run(),
        Command::Aggregate(c) => c.run(),
        Command::Validate(c) => c.run(),
        Command::AttnViz(c) => c.run(),
    }
}

#[allow(unused)]
fn _suppress(e: CmdError) {}
