//! `synth-data`: procedural tiles plus their manifest and survey CSVs.

use std::path::PathBuf;

use geosdg_core::ingest::{synth_dataset, Manifest, ManifestRecord, SynthParams};

use crate::errors::CmdResult;
use crate::formats::csvio::{write_manifest, write_survey};
use crate::formats::tile::write_tile;
use crate::log;

pub struct SynthArgs {
    pub out_dir: PathBuf,
    pub params: SynthParams,
}

pub fn run(args: &SynthArgs) -> CmdResult<()> {
    let data = synth_dataset(&args.params)?;
    let tiles_dir = args.out_dir.join("tiles");

    let mut records = Vec::with_capacity(data.tiles.len());
    for (tile, survey) in data.tiles.iter().zip(&data.survey) {
        let rel = format!("tiles/{}.gtil", tile.tile_id);
        write_tile(&tiles_dir.join(format!("{}.gtil", tile.tile_id)), tile)?;
        records.push(ManifestRecord {
            tile_id: tile.tile_id.clone(),
            path: rel,
            lat: tile.lat,
            lon: tile.lon,
            date: tile.date.clone(),
            source: tile.source,
            cloud_cover: tile.cloud_cover,
            round: survey.round,
            location_id: Some(survey.location_id.clone()),
            country: survey.country.clone(),
        });
    }
    let manifest = Manifest::new(records)?;
    write_manifest(&args.out_dir.join("manifest.csv"), &manifest)?;
    write_survey(&args.out_dir.join("survey.csv"), &data.survey)?;
    log(format!(
        "synth-data: wrote {} tiles to {}",
        data.tiles.len(),
        args.out_dir.display()
    ));
    Ok(())
}
