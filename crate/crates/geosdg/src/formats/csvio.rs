//! CSV schemas for every pipeline artifact.
//!
//! Plain comma-separated files with fixed headers, no quoting (fields
//! containing commas are rejected at write time). Floats are written
//! in shortest round-trip form except percentage columns, which are
//! fixed to two decimals at this boundary.

use std::fmt::Write as _;
use std::path::Path;

use geosdg_core::aggregate::{CountryEstimate, LocationPrediction, PopulationCell, StratRow, ValidationReport};
use geosdg_core::ingest::{Manifest, ManifestRecord, Source, SurveyRecord};
use geosdg_core::knn::{EmbeddingRow, SweepResult, Task};
use geosdg_core::numerics::Tensor;

use crate::errors::{CmdError, CmdResult};
use crate::write_atomic;

pub const MANIFEST_HEADER: &str =
    "tile_id,path,lat,lon,date,source,cloud_cover,round,location_id,country";
pub const SURVEY_HEADER: &str = "location_id,lat,lon,round,urban,piped_water,sewage,country";
pub const SWEEP_HEADER: &str = "k,accuracy,precision,recall,f1";
pub const LOSS_LOG_HEADER: &str = "step,loss,lr,wd,lambda,collapse_metric";
pub const LOCATIONS_HEADER: &str = "location_id,lat,lon,task,score,label";
pub const POPULATION_HEADER: &str = "lat,lon,population,country";
pub const JMP_HEADER: &str = "country,year,piped_pct,sewage_pct";
pub const ESTIMATES_HEADER: &str = "country,task,access_pct,population_covered,n_locations";
pub const VALIDATION_HEADER: &str = "task,n_pairs,dropped,slope,intercept,r_squared,pearson_r_squared,weighted_r_squared,weighted_slope,reported_r_squared";
pub const SCATTER_HEADER: &str = "country,task,model_pct,official_pct,population";
pub const URBAN_RURAL_HEADER: &str = "country,round,task,urban_pct,rural_pct";

fn field_ok(s: &str) -> CmdResult<&str> {
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(CmdError::config(format!(
            "field '{s}' contains a delimiter and cannot be written unquoted"
        )));
    }
    Ok(s)
}

/// Splits a CSV file into (1-based row number, fields) tuples,
/// checking the header.
fn rows<'a>(
    path: &'a Path,
    content: &'a str,
    header: &str,
) -> CmdResult<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim_end_matches('\r') == header => {}
        Some((_, first)) => {
            return Err(CmdError::format(
                path,
                format!("row 1: expected header '{header}', found '{first}'"),
            ))
        }
        None => return Err(CmdError::format(path, "empty file")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        out.push((i + 1, line.split(',').collect()));
    }
    Ok(out)
}

fn expect_fields(path: &Path, row: usize, fields: &[&str], n: usize) -> CmdResult<()> {
    if fields.len() != n {
        return Err(CmdError::format(
            path,
            format!("row {row}: expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, row: usize, what: &str, s: &str) -> CmdResult<T> {
    s.parse().map_err(|_| {
        CmdError::format(path, format!("row {row}: cannot parse {what} from '{s}'"))
    })
}

fn parse_bool01(path: &Path, row: usize, what: &str, s: &str) -> CmdResult<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(CmdError::format(
            path,
            format!("row {row}: {what} must be 0 or 1, found '{other}'"),
        )),
    }
}

fn read_to_string(path: &Path) -> CmdResult<String> {
    std::fs::read_to_string(path).map_err(|e| CmdError::io(path, e))
}

// ── Manifest ─────────────────────────────────────────────────────────

pub fn write_manifest(path: &Path, manifest: &Manifest) -> CmdResult<()> {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in manifest.records() {
        let loc = r.location_id.as_deref().unwrap_or("");
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            field_ok(&r.tile_id)?,
            field_ok(&r.path)?,
            r.lat,
            r.lon,
            field_ok(&r.date)?,
            r.source.as_str(),
            r.cloud_cover,
            r.round,
            field_ok(loc)?,
            field_ok(&r.country)?,
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_manifest(path: &Path) -> CmdResult<Manifest> {
    let content = read_to_string(path)?;
    let mut records = Vec::new();
    for (row, f) in rows(path, &content, MANIFEST_HEADER)? {
        expect_fields(path, row, &f, 10)?;
        records.push(ManifestRecord {
            tile_id: f[0].to_string(),
            path: f[1].to_string(),
            lat: parse(path, row, "lat", f[2])?,
            lon: parse(path, row, "lon", f[3])?,
            date: f[4].to_string(),
            source: Source::parse(f[5]).map_err(|e| CmdError::format(path, format!("row {row}: {e}")))?,
            cloud_cover: parse(path, row, "cloud_cover", f[6])?,
            round: parse(path, row, "round", f[7])?,
            location_id: if f[8].is_empty() {
                None
            } else {
                Some(f[8].to_string())
            },
            country: f[9].to_string(),
        });
    }
    Manifest::new(records).map_err(|e| CmdError::format(path, e.to_string()))
}

// ── Survey ───────────────────────────────────────────────────────────

pub fn write_survey(path: &Path, records: &[SurveyRecord]) -> CmdResult<()> {
    let mut s = String::from(SURVEY_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            field_ok(&r.location_id)?,
            r.lat,
            r.lon,
            r.round,
            r.urban as u8,
            r.piped_water as u8,
            r.sewage as u8,
            field_ok(&r.country)?,
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_survey(path: &Path) -> CmdResult<Vec<SurveyRecord>> {
    let content = read_to_string(path)?;
    let mut records = Vec::new();
    for (row, f) in rows(path, &content, SURVEY_HEADER)? {
        expect_fields(path, row, &f, 8)?;
        let rec = SurveyRecord {
            location_id: f[0].to_string(),
            lat: parse(path, row, "lat", f[1])?,
            lon: parse(path, row, "lon", f[2])?,
            round: parse(path, row, "round", f[3])?,
            urban: parse_bool01(path, row, "urban", f[4])?,
            piped_water: parse_bool01(path, row, "piped_water", f[5])?,
            sewage: parse_bool01(path, row, "sewage", f[6])?,
            country: f[7].to_string(),
        };
        rec.validate()
            .map_err(|e| CmdError::format(path, format!("row {row}: {e}")))?;
        records.push(rec);
    }
    Ok(records)
}

// ── Embeddings ───────────────────────────────────────────────────────

pub fn embeddings_header(dim: usize) -> String {
    let mut h = String::from("row_id,task,label,dim");
    for i in 0..dim {
        write!(h, ",e_{i}").expect("string write");
    }
    h
}

/// One output embedding row; `label` is blank when unlabeled.
pub struct EmbeddingOut<'a> {
    pub row_id: &'a str,
    pub task: Task,
    pub label: Option<bool>,
    pub embedding: &'a [f32],
}

pub fn write_embeddings(path: &Path, dim: usize, rows_out: &[EmbeddingOut]) -> CmdResult<()> {
    let mut s = embeddings_header(dim);
    s.push('\n');
    for r in rows_out {
        if r.embedding.len() != dim {
            return Err(CmdError::config(format!(
                "row '{}' has dim {}, expected {dim}",
                r.row_id,
                r.embedding.len()
            )));
        }
        let label = match r.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        write!(s, "{},{},{},{}", field_ok(r.row_id)?, r.task.as_str(), label, dim)
            .expect("string write");
        for &v in r.embedding {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub struct EmbeddingFile {
    pub dim: usize,
    pub task: Option<Task>,
    /// Rows with a label.
    pub labeled: Vec<EmbeddingRow>,
    /// Rows without one (id, embedding).
    pub unlabeled: Vec<(String, Vec<f32>)>,
}

pub fn read_embeddings(path: &Path) -> CmdResult<EmbeddingFile> {
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.trim_end_matches('\r'),
        None => return Err(CmdError::format(path, "empty file")),
    };
    if !header.starts_with("row_id,task,label,dim") {
        return Err(CmdError::format(
            path,
            "expected header 'row_id,task,label,dim,e_0,...'",
        ));
    }
    let dim = header.split(',').count() - 4;

    let mut file = EmbeddingFile {
        dim,
        task: None,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
    };
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        expect_fields(path, row, &f, 4 + dim)?;
        let task = Task::parse(f[1])
            .map_err(|e| CmdError::format(path, format!("row {row}: {e}")))?;
        if let Some(prev) = file.task {
            if prev != task {
                return Err(CmdError::format(
                    path,
                    format!("row {row}: mixed tasks {prev:?} and {task:?}"),
                ));
            }
        }
        file.task = Some(task);
        let row_dim: usize = parse(path, row, "dim", f[3])?;
        if row_dim != dim {
            return Err(CmdError::format(
                path,
                format!("row {row}: dim {row_dim} does not match header dim {dim}"),
            ));
        }
        let mut e = Vec::with_capacity(dim);
        for (j, v) in f[4..].iter().enumerate() {
            e.push(parse::<f32>(path, row, &format!("e_{j}"), v)?);
        }
        match f[2] {
            "" => file.unlabeled.push((f[0].to_string(), e)),
            s => {
                let label = parse_bool01(path, row, "label", s)?;
                file.labeled.push(EmbeddingRow {
                    id: f[0].to_string(),
                    label,
                    embedding: e,
                });
            }
        }
    }
    Ok(file)
}

// ── Sweep / metrics ──────────────────────────────────────────────────

pub fn write_sweep(path: &Path, sweep: &SweepResult) -> CmdResult<()> {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for row in &sweep.rows {
        let m = &row.metrics;
        writeln!(
            s,
            "{},{},{},{},{}",
            row.k, m.accuracy, m.precision, m.recall, m.f1
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

// ── Loss log ─────────────────────────────────────────────────────────

pub fn loss_log_row(step: u64, loss: f64, lr: f64, wd: f64, lambda: f64, collapse: f64) -> String {
    format!("{step},{loss},{lr},{wd},{lambda},{collapse}\n")
}

// ── Per-location predictions ─────────────────────────────────────────

pub fn write_locations(path: &Path, locations: &[LocationPrediction]) -> CmdResult<()> {
    let mut s = String::from(LOCATIONS_HEADER);
    s.push('\n');
    for l in locations {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            field_ok(&l.location_id)?,
            l.lat,
            l.lon,
            l.task.as_str(),
            l.score,
            l.label as u8
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_locations(path: &Path) -> CmdResult<Vec<LocationPrediction>> {
    let content = read_to_string(path)?;
    let mut out = Vec::new();
    for (row, f) in rows(path, &content, LOCATIONS_HEADER)? {
        expect_fields(path, row, &f, 6)?;
        out.push(LocationPrediction {
            location_id: f[0].to_string(),
            lat: parse(path, row, "lat", f[1])?,
            lon: parse(path, row, "lon", f[2])?,
            task: Task::parse(f[3]).map_err(|e| CmdError::format(path, format!("row {row}: {e}")))?,
            score: parse(path, row, "score", f[4])?,
            label: parse_bool01(path, row, "label", f[5])?,
        });
    }
    Ok(out)
}

// ── Population cells ─────────────────────────────────────────────────

pub fn read_population(path: &Path) -> CmdResult<Vec<PopulationCell>> {
    let content = read_to_string(path)?;
    let mut out = Vec::new();
    for (row, f) in rows(path, &content, POPULATION_HEADER)? {
        expect_fields(path, row, &f, 4)?;
        out.push(PopulationCell {
            lat: parse(path, row, "lat", f[0])?,
            lon: parse(path, row, "lon", f[1])?,
            population: parse(path, row, "population", f[2])?,
            country: f[3].to_string(),
        });
    }
    Ok(out)
}

pub fn write_population(path: &Path, cells: &[PopulationCell]) -> CmdResult<()> {
    let mut s = String::from(POPULATION_HEADER);
    s.push('\n');
    for c in cells {
        writeln!(s, "{},{},{},{}", c.lat, c.lon, c.population, field_ok(&c.country)?)
            .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

// ── Official statistics (JMP) ────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct OfficialRow {
    pub country: String,
    pub year: u32,
    pub piped_pct: Option<f64>,
    pub sewage_pct: Option<f64>,
}

pub fn read_official(path: &Path) -> CmdResult<Vec<OfficialRow>> {
    let content = read_to_string(path)?;
    let mut out = Vec::new();
    for (row, f) in rows(path, &content, JMP_HEADER)? {
        expect_fields(path, row, &f, 4)?;
        let opt = |s: &str, what: &str| -> CmdResult<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(parse(path, row, what, s)?))
            }
        };
        out.push(OfficialRow {
            country: f[0].to_string(),
            year: parse(path, row, "year", f[1])?,
            piped_pct: opt(f[2], "piped_pct")?,
            sewage_pct: opt(f[3], "sewage_pct")?,
        });
    }
    Ok(out)
}

// ── Country estimates ────────────────────────────────────────────────

pub fn write_estimates(path: &Path, estimates: &[CountryEstimate]) -> CmdResult<()> {
    let mut s = String::from(ESTIMATES_HEADER);
    s.push('\n');
    for e in estimates {
        writeln!(
            s,
            "{},{},{:.2},{},{}",
            field_ok(&e.country)?,
            e.task.as_str(),
            100.0 * e.access_fraction,
            e.population_covered,
            e.n_locations
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub country: String,
    pub task: Task,
    pub access_pct: f64,
    pub population_covered: f64,
    pub n_locations: usize,
}

pub fn read_estimates(path: &Path) -> CmdResult<Vec<EstimateRow>> {
    let content = read_to_string(path)?;
    let mut out = Vec::new();
    for (row, f) in rows(path, &content, ESTIMATES_HEADER)? {
        expect_fields(path, row, &f, 5)?;
        out.push(EstimateRow {
            country: f[0].to_string(),
            task: Task::parse(f[1]).map_err(|e| CmdError::format(path, format!("row {row}: {e}")))?,
            access_pct: parse(path, row, "access_pct", f[2])?,
            population_covered: parse(path, row, "population_covered", f[3])?,
            n_locations: parse(path, row, "n_locations", f[4])?,
        });
    }
    Ok(out)
}

// ── Validation report and scatter ────────────────────────────────────

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_validation(
    path: &Path,
    reports: &[(Task, ValidationReport, Option<f64>)],
) -> CmdResult<()> {
    let mut s = String::from(VALIDATION_HEADER);
    s.push('\n');
    for (task, r, reported) in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            task.as_str(),
            r.n_pairs,
            r.dropped,
            r.slope,
            r.intercept,
            r.r_squared,
            r.pearson_r_squared,
            opt_f64(r.weighted_r_squared),
            opt_f64(r.weighted_slope),
            opt_f64(*reported),
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub country: String,
    pub task: Task,
    pub model_pct: f64,
    pub official_pct: f64,
    pub population: f64,
}

pub fn write_scatter(path: &Path, rows_out: &[ScatterRow]) -> CmdResult<()> {
    let mut s = String::from(SCATTER_HEADER);
    s.push('\n');
    for r in rows_out {
        writeln!(
            s,
            "{},{},{:.2},{:.2},{}",
            field_ok(&r.country)?,
            r.task.short_str(),
            r.model_pct,
            r.official_pct,
            r.population
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

// ── Urban/rural stratification ───────────────────────────────────────

pub fn write_urban_rural(path: &Path, rows_out: &[StratRow]) -> CmdResult<()> {
    let mut s = String::from(URBAN_RURAL_HEADER);
    s.push('\n');
    let pct = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for r in rows_out {
        writeln!(
            s,
            "{},{},{},{},{}",
            field_ok(&r.country)?,
            r.round,
            r.task.as_str(),
            pct(r.urban_pct),
            pct(r.rural_pct)
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

// ── Attention grids ──────────────────────────────────────────────────

/// Raw matrix CSV: one row per grid row, shortest round-trip floats.
pub fn write_grid(path: &Path, grid: &Tensor<f32>) -> CmdResult<()> {
    let (rows_n, cols) = grid
        .dims2()
        .map_err(|e| CmdError::Config(e.to_string()))?;
    let mut s = String::new();
    for r in 0..rows_n {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", grid.at2(r, c)).expect("string write");
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_grid(path: &Path) -> CmdResult<Tensor<f32>> {
    let content = read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows_n = 0;
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(CmdError::format(
                    path,
                    format!("row {}: ragged row width", i + 1),
                ))
            }
            _ => {}
        }
        for v in fields {
            data.push(parse::<f32>(path, i + 1, "cell", v)?);
        }
        rows_n += 1;
    }
    let cols = cols.ok_or_else(|| CmdError::format(path, "empty grid"))?;
    Tensor::from_vec(vec![rows_n, cols], data)
        .map_err(|e| CmdError::format(path, e.to_string()))
}
