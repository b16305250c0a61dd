//! `validate`: least-squares comparison of model country estimates
//! against official statistics, with the scatter export.

use std::collections::BTreeMap;
use std::path::PathBuf;

use geosdg_core::aggregate::r_squared;
use geosdg_core::knn::Task;

use crate::errors::{CmdError, CmdResult};
use crate::formats::csvio::{
    read_estimates, read_official, read_population, write_scatter, write_validation, ScatterRow,
};
use crate::log;

/// Published national-scale agreement figures the reports are laid
/// against (never asserted).
pub const REPORTED_R2_PIPED: f64 = 0.95;
pub const REPORTED_R2_SEWAGE: f64 = 0.85;

pub struct ValidateArgs {
    pub model: PathBuf,
    pub official: PathBuf,
    pub population: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn run(args: &ValidateArgs) -> CmdResult<()> {
    let model_rows = read_estimates(&args.model)?;
    let official_rows = read_official(&args.official)?;

    // country -> total population, from grid cells
    let populations: Option<BTreeMap<String, f64>> = match &args.population {
        None => None,
        Some(path) => {
            let cells = read_population(path)?;
            let mut totals: BTreeMap<String, f64> = BTreeMap::new();
            for c in cells {
                *totals.entry(c.country).or_insert(0.0) += c.population;
            }
            Some(totals)
        }
    };

    let mut official: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in &official_rows {
        official.insert(r.country.as_str(), (r.piped_pct, r.sewage_pct));
    }

    let mut tasks: Vec<Task> = model_rows.iter().map(|r| r.task).collect();
    tasks.sort();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(CmdError::ingest(format!(
            "{}: no model estimates",
            args.model.display()
        )));
    }

    let mut reports = Vec::new();
    let mut scatter: Vec<ScatterRow> = Vec::new();
    for task in tasks {
        // union of countries, sorted; absent sides become None
        let mut model: BTreeMap<&str, f64> = BTreeMap::new();
        for r in model_rows.iter().filter(|r| r.task == task) {
            model.insert(r.country.as_str(), r.access_pct);
        }
        let mut countries: Vec<&str> = model
            .keys()
            .copied()
            .chain(official.keys().copied())
            .collect();
        countries.sort_unstable();
        countries.dedup();

        let pick = |pair: &(Option<f64>, Option<f64>)| match task {
            Task::PipedWater => pair.0,
            Task::Sewage => pair.1,
        };
        let pairs: Vec<(Option<f64>, Option<f64>)> = countries
            .iter()
            .map(|c| {
                (
                    model.get(c).copied(),
                    official.get(c).and_then(&pick),
                )
            })
            .collect();

        let weights: Option<Vec<f64>> = match &populations {
            None => None,
            Some(totals) => {
                let mut w = Vec::with_capacity(countries.len());
                for (c, (m, o)) in countries.iter().zip(&pairs) {
                    if m.is_some() && o.is_some() {
                        match totals.get(*c) {
                            // retained pairs need a positive weight
                            Some(&p) if p > 0.0 => w.push(p),
                            _ => {
                                return Err(CmdError::config(format!(
                                    "population file has no positive total for '{c}'"
                                )))
                            }
                        }
                    } else {
                        w.push(1.0); // dropped before fitting anyway
                    }
                }
                Some(w)
            }
        };

        let report = r_squared(&pairs, weights.as_deref())?;
        log(format!(
            "validate: {} n={} r2={:.4} pearson2={:.4} slope={:.4}",
            task.as_str(),
            report.n_pairs,
            report.r_squared,
            report.pearson_r_squared,
            report.slope
        ));
        let reported = match task {
            Task::PipedWater => Some(REPORTED_R2_PIPED),
            Task::Sewage => Some(REPORTED_R2_SEWAGE),
        };
        reports.push((task, report, reported));

        for (c, (m, o)) in countries.iter().zip(&pairs) {
            if let (Some(m), Some(o)) = (m, o) {
                scatter.push(ScatterRow {
                    country: c.to_string(),
                    task,
                    model_pct: *m,
                    official_pct: *o,
                    population: populations
                        .as_ref()
                        .and_then(|t| t.get(*c).copied())
                        .unwrap_or(0.0),
                });
            }
        }
    }

    write_validation(&args.out_dir.join("validation.csv"), &reports)?;
    write_scatter(&args.out_dir.join("scatter.csv"), &scatter)?;
    log(format!("validate: wrote {} scatter rows", scatter.len()));
    Ok(())
}
