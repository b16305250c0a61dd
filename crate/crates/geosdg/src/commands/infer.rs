//! `infer`: classify query embeddings against a labeled index, then
//! fuse per-tile predictions into per-location labels.

use std::collections::BTreeMap;
use std::path::PathBuf;

use geosdg_core::aggregate::fuse_predictions;
use geosdg_core::knn::{classify, KnnIndex};

use crate::errors::{CmdError, CmdResult};
use crate::formats::csvio::{read_embeddings, read_manifest, write_locations};
use crate::log;

pub struct InferArgs {
    pub index: PathBuf,
    pub queries: PathBuf,
    pub manifest: PathBuf,
    pub k: usize,
    pub normalize: bool,
    pub out_dir: PathBuf,
}

pub fn run(args: &InferArgs) -> CmdResult<()> {
    let index_file = read_embeddings(&args.index)?;
    let task = index_file
        .task
        .ok_or_else(|| CmdError::ingest(format!("{}: no rows", args.index.display())))?;
    if index_file.labeled.is_empty() {
        return Err(CmdError::ingest(format!(
            "{}: index file has no labeled rows",
            args.index.display()
        )));
    }
    let index = KnnIndex::build(index_file.labeled, task, args.normalize)?;
    if args.k == 0 || args.k > index.len() {
        return Err(CmdError::config(format!(
            "k = {} outside 1..={}",
            args.k,
            index.len()
        )));
    }

    let query_file = read_embeddings(&args.queries)?;
    let mut queries: Vec<(String, Vec<f32>)> = query_file.unlabeled;
    queries.extend(
        query_file
            .labeled
            .into_iter()
            .map(|r| (r.id, r.embedding)),
    );
    queries.sort_by(|a, b| a.0.cmp(&b.0));

    // manifest maps tile -> location and carries coordinates
    let manifest = read_manifest(&args.manifest)?;
    let mut by_tile: BTreeMap<&str, (&str, f64, f64)> = BTreeMap::new();
    for rec in manifest.records() {
        if let Some(loc) = &rec.location_id {
            by_tile.insert(&rec.tile_id, (loc, rec.lat, rec.lon));
        }
    }

    let mut skipped = 0usize;
    struct Group {
        lat_sum: f64,
        lon_sum: f64,
        preds: Vec<bool>,
    }
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for (tile_id, embedding) in &queries {
        let Some(&(loc, lat, lon)) = by_tile.get(tile_id.as_str()) else {
            skipped += 1;
            continue;
        };
        let label = classify(&index, embedding, args.k)?.label;
        let g = groups.entry(loc.to_string()).or_insert(Group {
            lat_sum: 0.0,
            lon_sum: 0.0,
            preds: Vec::new(),
        });
        g.lat_sum += lat;
        g.lon_sum += lon;
        g.preds.push(label);
    }
    if skipped > 0 {
        log(format!(
            "infer: {skipped} query tiles had no manifest location link"
        ));
    }
    if groups.is_empty() {
        return Err(CmdError::ingest(
            "no query tiles could be grouped by location",
        ));
    }

    let grouped: Vec<(String, f64, f64, geosdg_core::knn::Task, Vec<bool>)> = groups
        .into_iter()
        .map(|(loc, g)| {
            let n = g.preds.len() as f64;
            (loc, g.lat_sum / n, g.lon_sum / n, task, g.preds)
        })
        .collect();
    let locations = fuse_predictions(&grouped)?;

    let out = args
        .out_dir
        .join(format!("locations_{}.csv", task.as_str()));
    write_locations(&out, &locations)?;
    log(format!(
        "infer: wrote {} locations to {}",
        locations.len(),
        out.display()
    ));
    Ok(())
}
