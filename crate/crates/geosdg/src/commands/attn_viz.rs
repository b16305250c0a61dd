//! `attn-viz`: per-head CLS attention grids for one layer, exported as
//! matrix CSVs.

use std::path::PathBuf;

use geosdg_core::ingest::resample_bilinear;
use geosdg_core::vit::attention_maps;

use crate::commands::embed::{select_network, Network};
use crate::errors::{CmdError, CmdResult};
use crate::formats::checkpoint::load_checkpoint;
use crate::formats::csvio::write_grid;
use crate::formats::tile::load_tile;
use crate::log;

pub struct AttnVizArgs {
    pub checkpoint: PathBuf,
    pub tile: PathBuf,
    pub layer: usize,
    pub network: Network,
    pub out_dir: PathBuf,
}

pub fn run(args: &AttnVizArgs) -> CmdResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let params = select_network(&ckpt, args.network);
    let config = &ckpt.config;

    let tile = load_tile(&args.tile)?;
    if tile.bands() != config.bands {
        return Err(CmdError::ingest(format!(
            "tile has {} bands, model expects {}",
            tile.bands(),
            config.bands
        )));
    }
    let raster = resample_bilinear(&tile.raster, config.image_size, config.image_size)?;

    let attn = attention_maps(&params, &raster, args.layer)?;
    for (h, grid) in attn.grids.iter().enumerate() {
        let path = args
            .out_dir
            .join(format!("attn_layer{}_head{:02}.csv", args.layer, h));
        write_grid(&path, grid)?;
    }
    log(format!(
        "attn-viz: wrote {} head grids for layer {}",
        attn.grids.len(),
        args.layer
    ));
    Ok(())
}
