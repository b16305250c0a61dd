//! Pipeline commands behind the CLI subcommands.

use std::path::{Path, PathBuf};

use geosdg_core::ingest::{resample_bilinear, Manifest, Tile};

use crate::errors::{CmdError, CmdResult};
use crate::formats::tile::load_tile;

pub mod aggregate;
pub mod attn_viz;
pub mod embed;
pub mod infer;
pub mod knn_eval;
pub mod pretrain;
pub mod synth;
pub mod validate;

/// Resolves a manifest-relative tile path.
fn resolve_path(manifest_path: &Path, tile_path: &str) -> PathBuf {
    let p = Path::new(tile_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

/// Loads every manifest tile, resamples to `target_size` when given,
/// and reports all unreadable paths at once.
pub fn load_manifest_tiles(
    manifest_path: &Path,
    manifest: &Manifest,
    bands: usize,
    target_size: Option<usize>,
) -> CmdResult<Vec<Tile>> {
    let mut tiles = Vec::with_capacity(manifest.len());
    let mut bad: Vec<String> = Vec::new();
    for rec in manifest.records() {
        let path = resolve_path(manifest_path, &rec.path);
        match load_tile(&path) {
            Ok(mut tile) => {
                tile.tile_id = rec.tile_id.clone();
                if tile.bands() != bands {
                    bad.push(format!(
                        "{} ({} bands, expected {bands})",
                        path.display(),
                        tile.bands()
                    ));
                    continue;
                }
                if let Some(size) = target_size {
                    tile.raster = resample_bilinear(&tile.raster, size, size)
                        .map_err(CmdError::from)?;
                }
                tiles.push(tile);
            }
            Err(e) => bad.push(format!("{} ({e})", path.display())),
        }
    }
    if !bad.is_empty() {
        return Err(CmdError::ingest(format!(
            "{} unreadable or mismatched tiles: {}",
            bad.len(),
            bad.join("; ")
        )));
    }
    Ok(tiles)
}
