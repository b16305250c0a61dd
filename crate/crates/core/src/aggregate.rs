//! Continental-scale estimation: per-location fusion of tile
//! predictions, population-weighted national access fractions,
//! urban/rural stratified rates, and least-squares validation against
//! official statistics.
//!
//! Percentages are carried as fractions internally; formatting to two
//! decimals happens at the CSV boundary in the companion crate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ingest::{haversine_m, SurveyRecord};
use crate::knn::Task;

/// Default cell-to-location assignment radius, meters.
pub const DEFAULT_ASSIGN_RADIUS_M: f64 = 5000.0;

/// Mean of a group of binary tile predictions plus the fused label.
/// A score of exactly 0.5 fuses to `false` (conservative tie rule).
pub fn fuse_group(predictions: &[bool]) -> Result<(f64, bool)> {
    if predictions.is_empty() {
        return Err(Error::invalid("cannot fuse an empty prediction group"));
    }
    let positives = predictions.iter().filter(|&&p| p).count();
    let score = positives as f64 / predictions.len() as f64;
    Ok((score, score > 0.5))
}

/// A fused per-location prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationPrediction {
    pub location_id: String,
    pub lat: f64,
    pub lon: f64,
    pub task: Task,
    pub score: f64,
    pub label: bool,
}

/// Fuses per-tile predictions grouped by location.
pub fn fuse_predictions(
    groups: &[(String, f64, f64, Task, Vec<bool>)],
) -> Result<Vec<LocationPrediction>> {
    let mut out = Vec::with_capacity(groups.len());
    for (location_id, lat, lon, task, preds) in groups {
        let (score, label) = fuse_group(preds)
            .map_err(|_| Error::invalid(format!("empty prediction group for '{location_id}'")))?;
        out.push(LocationPrediction {
            location_id: location_id.clone(),
            lat: *lat,
            lon: *lon,
            task: *task,
            score,
            label,
        });
    }
    Ok(out)
}

/// One population grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCell {
    pub lat: f64,
    pub lon: f64,
    pub population: f64,
    pub country: String,
}

impl PopulationCell {
    pub fn validate(&self) -> Result<()> {
        if self.population < 0.0 || !self.population.is_finite() {
            return Err(Error::invalid(format!(
                "population {} at ({}, {}) invalid",
                self.population, self.lat, self.lon
            )));
        }
        if self.country.is_empty() {
            return Err(Error::invalid(format!(
                "population cell at ({}, {}) has no country",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryEstimate {
    pub country: String,
    pub task: Task,
    /// Population-weighted access fraction in [0, 1].
    pub access_fraction: f64,
    pub population_covered: f64,
    /// Distinct predicted locations serving at least one cell.
    pub n_locations: usize,
}

/// Cells that no predicted location covered, per country.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoverageReport {
    pub excluded_cells: usize,
    pub excluded_population: f64,
    /// Countries whose every cell was excluded.
    pub uncovered_countries: Vec<String>,
}

/// Assigns each population cell the label of the nearest predicted
/// location within `radius_m`, then aggregates
/// Σ(pop·label)/Σ(pop) per country. Unassigned cells are excluded and
/// reported, never imputed.
pub fn population_weighted_access(
    locations: &[LocationPrediction],
    cells: &[PopulationCell],
    radius_m: f64,
) -> Result<(Vec<CountryEstimate>, CoverageReport)> {
    if radius_m <= 0.0 {
        return Err(Error::config(format!(
            "assignment radius {radius_m} must be > 0"
        )));
    }
    for c in cells {
        c.validate()?;
    }

    #[derive(Default)]
    struct Acc {
        pop: f64,
        pop_served: f64,
        locations: BTreeMap<String, ()>,
    }
    let mut tasks: Vec<Task> = locations.iter().map(|l| l.task).collect();
    tasks.sort();
    tasks.dedup();

    let mut per_country: BTreeMap<(String, Task), Acc> = BTreeMap::new();
    let mut report = CoverageReport::default();

    // assignment is per task: a cell inherits the label of the nearest
    // predicted location carrying that task, ties toward the smaller id
    for &task in &tasks {
        let task_locs: Vec<&LocationPrediction> =
            locations.iter().filter(|l| l.task == task).collect();
        for cell in cells {
            let mut best: Option<(&LocationPrediction, f64)> = None;
            for &loc in &task_locs {
                let d = haversine_m(cell.lat, cell.lon, loc.lat, loc.lon);
                let better = match best {
                    None => true,
                    Some((bl, bd)) => d < bd || (d == bd && loc.location_id < bl.location_id),
                };
                if better {
                    best = Some((loc, d));
                }
            }
            match best {
                Some((loc, d)) if d <= radius_m => {
                    let acc = per_country
                        .entry((cell.country.clone(), task))
                        .or_default();
                    acc.pop += cell.population;
                    if loc.label {
                        acc.pop_served += cell.population;
                    }
                    acc.locations.insert(loc.location_id.clone(), ());
                }
                _ => {
                    report.excluded_cells += 1;
                    report.excluded_population += cell.population;
                }
            }
        }
    }

    let mut estimates = Vec::new();
    for ((country, task), acc) in &per_country {
        if acc.pop <= 0.0 {
            continue;
        }
        estimates.push(CountryEstimate {
            country: country.clone(),
            task: *task,
            access_fraction: acc.pop_served / acc.pop,
            population_covered: acc.pop,
            n_locations: acc.locations.len(),
        });
    }
    let covered: BTreeMap<(&str, Task), ()> = estimates
        .iter()
        .map(|e| ((e.country.as_str(), e.task), ()))
        .collect();
    let mut uncovered: Vec<String> = Vec::new();
    for cell in cells {
        for &task in &tasks {
            if !covered.contains_key(&(cell.country.as_str(), task))
                && !uncovered.contains(&cell.country)
            {
                uncovered.push(cell.country.clone());
            }
        }
    }
    uncovered.sort();
    report.uncovered_countries = uncovered;
    Ok((estimates, report))
}

/// One stratified rate cell: percentages 0..=100, `None` when
/// no records fall in the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StratRow {
    pub country: String,
    pub round: u8,
    pub task: Task,
    pub urban_pct: Option<f64>,
    pub rural_pct: Option<f64>,
    pub urban_count: usize,
    pub rural_count: usize,
}

/// Urban/rural access rates per (country, round, task), in percent.
pub fn urban_rural_rates(records: &[SurveyRecord]) -> Result<Vec<StratRow>> {
    #[derive(Default)]
    struct Cell {
        urban_total: usize,
        urban_pos: [usize; 2],
        rural_total: usize,
        rural_pos: [usize; 2],
    }
    let mut cells: BTreeMap<(String, u8), Cell> = BTreeMap::new();
    for r in records {
        r.validate()?;
        let cell = cells.entry((r.country.clone(), r.round)).or_default();
        let labels = [r.piped_water, r.sewage];
        if r.urban {
            cell.urban_total += 1;
            for (i, &l) in labels.iter().enumerate() {
                if l {
                    cell.urban_pos[i] += 1;
                }
            }
        } else {
            cell.rural_total += 1;
            for (i, &l) in labels.iter().enumerate() {
                if l {
                    cell.rural_pos[i] += 1;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for ((country, round), cell) in &cells {
        for (i, task) in [Task::PipedWater, Task::Sewage].into_iter().enumerate() {
            rows.push(StratRow {
                country: country.clone(),
                round: *round,
                task,
                urban_pct: (cell.urban_total > 0)
                    .then(|| 100.0 * cell.urban_pos[i] as f64 / cell.urban_total as f64),
                rural_pct: (cell.rural_total > 0)
                    .then(|| 100.0 * cell.rural_pos[i] as f64 / cell.rural_total as f64),
                urban_count: cell.urban_total,
                rural_count: cell.rural_total,
            });
        }
    }
    Ok(rows)
}

/// Ordinary least squares of `official` (y) on `model` (x), with the
/// population-weighted variant and squared Pearson correlation
/// alongside. Pairs missing either side are dropped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub task: Option<Task>,
    pub n_pairs: usize,
    pub dropped: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub pearson_r_squared: f64,
    pub weighted_r_squared: Option<f64>,
    pub weighted_slope: Option<f64>,
}

fn ols(xs: &[f64], ys: &[f64], ws: Option<&[f64]>) -> Result<(f64, f64, f64)> {
    let wsum: f64 = match ws {
        Some(w) => w.iter().sum(),
        None => xs.len() as f64,
    };
    let wt = |i: usize| ws.map(|w| w[i]).unwrap_or(1.0);
    let xbar: f64 = xs.iter().enumerate().map(|(i, x)| wt(i) * x).sum::<f64>() / wsum;
    let ybar: f64 = ys.iter().enumerate().map(|(i, y)| wt(i) * y).sum::<f64>() / wsum;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = xs[i] - xbar;
        let dy = ys[i] - ybar;
        sxx += wt(i) * dx * dx;
        sxy += wt(i) * dx * dy;
        syy += wt(i) * dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(
            "zero variance in model values".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        let mut ss_res = 0.0;
        for i in 0..xs.len() {
            let r = ys[i] - (slope * xs[i] + intercept);
            ss_res += wt(i) * r * r;
        }
        1.0 - ss_res / syy
    };
    Ok((slope, intercept, r2))
}

pub fn r_squared(
    pairs: &[(Option<f64>, Option<f64>)],
    weights: Option<&[f64]>,
) -> Result<ValidationReport> {
    if let Some(w) = weights {
        if w.len() != pairs.len() {
            return Err(Error::shape(format!(
                "{} weights for {} pairs",
                w.len(),
                pairs.len()
            )));
        }
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::invalid("weights must be positive and finite"));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut dropped = 0;
    for (i, (m, o)) in pairs.iter().enumerate() {
        match (m, o) {
            (Some(m), Some(o)) if m.is_finite() && o.is_finite() => {
                xs.push(*m);
                ys.push(*o);
                if let Some(w) = weights {
                    ws.push(w[i]);
                }
            }
            _ => dropped += 1,
        }
    }
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 complete pairs, got {}",
            xs.len()
        )));
    }

    let (slope, intercept, r2) = ols(&xs, &ys, None)?;

    // squared Pearson correlation
    let n = xs.len() as f64;
    let xbar: f64 = xs.iter().sum::<f64>() / n;
    let ybar: f64 = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..xs.len() {
        sxx += (xs[i] - xbar) * (xs[i] - xbar);
        syy += (ys[i] - ybar) * (ys[i] - ybar);
        sxy += (xs[i] - xbar) * (ys[i] - ybar);
    }
    let pearson_r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };

    let (weighted_slope, weighted_r_squared) = if weights.is_some() {
        let (ws_slope, _, ws_r2) = ols(&xs, &ys, Some(&ws))?;
        (Some(ws_slope), Some(ws_r2))
    } else {
        (None, None)
    };

    Ok(ValidationReport {
        task: None,
        n_pairs: xs.len(),
        dropped,
        slope,
        intercept,
        r_squared: r2,
        pearson_r_squared,
        weighted_r_squared,
        weighted_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn fuse_rules() {
        assert_eq!(fuse_group(&[true]).unwrap(), (1.0, true));
        let (score, label) = fuse_group(&[true, true, false]).unwrap();
        assert!((score - 2.0 / 3.0).abs() < 1e-12);
        assert!(label);
        // exact 0.5 fuses to false
        assert_eq!(fuse_group(&[true, false]).unwrap(), (0.5, false));
        assert!(fuse_group(&[]).is_err());
    }

    #[test]
    fn fuse_is_permutation_invariant() {
        let mut rng = Rng::seed(51);
        for _ in 0..50 {
            let n = 1 + rng.next_below(9);
            let preds: Vec<bool> = (0..n).map(|_| rng.next_bool(0.5)).collect();
            let base = fuse_group(&preds).unwrap();
            let perm = rng.permutation(n);
            let shuffled: Vec<bool> = perm.iter().map(|&i| preds[i]).collect();
            assert_eq!(base, fuse_group(&shuffled).unwrap());
        }
    }

    fn loc(id: &str, lat: f64, lon: f64, label: bool) -> LocationPrediction {
        LocationPrediction {
            location_id: id.to_string(),
            lat,
            lon,
            task: Task::PipedWater,
            score: if label { 1.0 } else { 0.0 },
            label,
        }
    }

    fn cell(lat: f64, lon: f64, pop: f64, country: &str) -> PopulationCell {
        PopulationCell {
            lat,
            lon,
            population: pop,
            country: country.to_string(),
        }
    }

    #[test]
    fn weighted_access_hand_fixture() {
        // two cells, pops {10, 30}, labels {1, 0} -> 0.25
        let locs = vec![loc("a", 0.0, 0.0, true), loc("b", 0.0, 1.0, false)];
        let cells = vec![cell(0.0, 0.001, 10.0, "KEN"), cell(0.0, 0.999, 30.0, "KEN")];
        let (est, rep) = population_weighted_access(&locs, &cells, 5000.0).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].access_fraction, 0.25);
        assert_eq!(est[0].population_covered, 40.0);
        assert_eq!(est[0].n_locations, 2);
        assert_eq!(rep.excluded_cells, 0);
    }

    #[test]
    fn weighted_access_all_positive_is_one() {
        let locs = vec![loc("a", 0.0, 0.0, true), loc("b", 10.0, 10.0, true)];
        let cells = vec![
            cell(0.001, 0.0, 5.0, "KEN"),
            cell(10.0, 10.001, 7.0, "TZA"),
        ];
        let (est, _) = population_weighted_access(&locs, &cells, 5000.0).unwrap();
        assert_eq!(est.len(), 2);
        for e in est {
            assert_eq!(e.access_fraction, 1.0);
        }
    }

    #[test]
    fn cells_beyond_radius_are_excluded_not_imputed() {
        let locs = vec![loc("a", 0.0, 0.0, true)];
        let cells = vec![
            cell(0.0, 0.01, 100.0, "KEN"), // ~1.1 km, inside
            cell(0.0, 1.0, 999.0, "UGA"),  // ~111 km, outside
        ];
        let (est, rep) = population_weighted_access(&locs, &cells, 5000.0).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].country, "KEN");
        assert_eq!(rep.excluded_cells, 1);
        assert_eq!(rep.excluded_population, 999.0);
        assert_eq!(rep.uncovered_countries, vec!["UGA".to_string()]);
    }

    #[test]
    fn weighted_access_is_population_scale_invariant() {
        let mut rng = Rng::seed(53);
        let locs: Vec<LocationPrediction> = (0..10)
            .map(|i| {
                loc(
                    &format!("l{i}"),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.next_bool(0.5),
                )
            })
            .collect();
        let cells: Vec<PopulationCell> = (0..40)
            .map(|_| {
                cell(
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(1.0, 100.0),
                    if rng.next_bool(0.5) { "KEN" } else { "TZA" },
                )
            })
            .collect();
        let radius = 300_000.0;
        let (base, _) = population_weighted_access(&locs, &cells, radius).unwrap();
        let scaled_cells: Vec<PopulationCell> = cells
            .iter()
            .map(|c| PopulationCell {
                population: c.population * 1e6,
                ..c.clone()
            })
            .collect();
        let (scaled, _) = population_weighted_access(&locs, &scaled_cells, radius).unwrap();
        assert_eq!(base.len(), scaled.len());
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a.access_fraction - b.access_fraction).abs() <= 1e-12);
        }
    }

    #[test]
    fn access_fraction_is_a_convex_combination() {
        let mut rng = Rng::seed(54);
        for _ in 0..20 {
            let locs: Vec<LocationPrediction> = (0..6)
                .map(|i| {
                    loc(
                        &format!("l{i}"),
                        rng.uniform(-0.5, 0.5),
                        rng.uniform(-0.5, 0.5),
                        rng.next_bool(0.5),
                    )
                })
                .collect();
            let cells: Vec<PopulationCell> = (0..25)
                .map(|_| {
                    cell(
                        rng.uniform(-0.5, 0.5),
                        rng.uniform(-0.5, 0.5),
                        rng.uniform(0.1, 50.0),
                        "KEN",
                    )
                })
                .collect();
            let (est, _) = population_weighted_access(&locs, &cells, 500_000.0).unwrap();
            for e in est {
                assert!((0.0..=1.0).contains(&e.access_fraction));
            }
        }
    }

    #[test]
    fn stratified_rates_fixture() {
        // 4 urban records, 3 with piped -> urban 75.00
        let mut records = Vec::new();
        for i in 0..4 {
            records.push(SurveyRecord {
                location_id: format!("u{i}"),
                lat: 0.0,
                lon: 0.0,
                round: 7,
                urban: true,
                piped_water: i < 3,
                sewage: false,
                country: "KEN".to_string(),
            });
        }
        let rows = urban_rural_rates(&records).unwrap();
        let piped = rows
            .iter()
            .find(|r| r.task == Task::PipedWater)
            .unwrap();
        assert_eq!(piped.urban_pct, Some(75.0));
        // all records urban -> rural blank
        assert_eq!(piped.rural_pct, None);
        // totals: urban + rural counts equal record count
        assert_eq!(piped.urban_count + piped.rural_count, 4);
    }

    #[test]
    fn stratified_rates_reproduce_botswana_round7() {
        // urban 32/33 piped and sewage; rural 32/47 piped, 2/47 sewage
        let mut records = Vec::new();
        for i in 0..33 {
            records.push(SurveyRecord {
                location_id: format!("u{i}"),
                lat: 0.0,
                lon: 0.0,
                round: 7,
                urban: true,
                piped_water: i < 32,
                sewage: i < 32,
                country: "BWA".to_string(),
            });
        }
        for i in 0..47 {
            records.push(SurveyRecord {
                location_id: format!("r{i}"),
                lat: 0.0,
                lon: 0.0,
                round: 7,
                urban: false,
                piped_water: i < 32,
                sewage: i < 2,
                country: "BWA".to_string(),
            });
        }
        let rows = urban_rural_rates(&records).unwrap();
        let piped = rows.iter().find(|r| r.task == Task::PipedWater).unwrap();
        let sewage = rows.iter().find(|r| r.task == Task::Sewage).unwrap();
        let fmt = |x: f64| alloc::format!("{x:.2}");
        assert_eq!(fmt(piped.urban_pct.unwrap()), "96.97");
        assert_eq!(fmt(piped.rural_pct.unwrap()), "68.09");
        assert_eq!(fmt(sewage.urban_pct.unwrap()), "96.97");
        assert_eq!(fmt(sewage.rural_pct.unwrap()), "4.26");
    }

    #[test]
    fn r_squared_exact_cases() {
        let pairs: Vec<(Option<f64>, Option<f64>)> =
            vec![(Some(1.0), Some(1.0)), (Some(2.0), Some(2.0)), (Some(3.0), Some(3.0))];
        let rep = r_squared(&pairs, None).unwrap();
        assert!((rep.r_squared - 1.0).abs() < 1e-12);
        assert!((rep.slope - 1.0).abs() < 1e-12);
        assert!(rep.intercept.abs() < 1e-12);

        // model [0,1,2], official [0,2,4] -> slope 2, intercept 0, R^2 1
        let pairs: Vec<(Option<f64>, Option<f64>)> =
            vec![(Some(0.0), Some(0.0)), (Some(1.0), Some(2.0)), (Some(2.0), Some(4.0))];
        let rep = r_squared(&pairs, None).unwrap();
        assert!((rep.slope - 2.0).abs() < 1e-12);
        assert!(rep.intercept.abs() < 1e-12);
        assert!((rep.r_squared - 1.0).abs() < 1e-12);
        assert!((rep.pearson_r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn r_squared_affine_and_shift_invariances() {
        let mut rng = Rng::seed(55);
        let xs: Vec<f64> = (0..20).map(|_| rng.uniform(0.0, 100.0)).collect();
        // r_squared(x, a*x + b) = 1 for a != 0
        for (a, b) in [(2.5, -3.0), (-1.0, 40.0), (0.1, 0.0)] {
            let pairs: Vec<(Option<f64>, Option<f64>)> =
                xs.iter().map(|&x| (Some(x), Some(a * x + b))).collect();
            let rep = r_squared(&pairs, None).unwrap();
            assert!((rep.r_squared - 1.0).abs() < 1e-9, "a={a} b={b}");
        }
        // invariance of R^2 under shifting the official values
        let ys: Vec<f64> = xs.iter().map(|&x| 0.7 * x + rng.uniform(-5.0, 5.0)).collect();
        let p1: Vec<(Option<f64>, Option<f64>)> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| (Some(x), Some(y)))
            .collect();
        let p2: Vec<(Option<f64>, Option<f64>)> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| (Some(x), Some(y + 123.456)))
            .collect();
        let r1 = r_squared(&p1, None).unwrap();
        let r2 = r_squared(&p2, None).unwrap();
        assert!((r1.r_squared - r2.r_squared).abs() < 1e-9);
    }

    #[test]
    fn r_squared_drops_incomplete_pairs_and_rejects_degenerates() {
        let pairs: Vec<(Option<f64>, Option<f64>)> = vec![
            (Some(1.0), Some(2.0)),
            (Some(2.0), None),
            (None, Some(3.0)),
            (Some(3.0), Some(5.0)),
        ];
        let rep = r_squared(&pairs, None).unwrap();
        assert_eq!(rep.n_pairs, 2);
        assert_eq!(rep.dropped, 2);

        let flat: Vec<(Option<f64>, Option<f64>)> =
            vec![(Some(1.0), Some(2.0)), (Some(1.0), Some(5.0))];
        assert!(matches!(
            r_squared(&flat, None),
            Err(Error::DegenerateFit(_))
        ));

        let weights = vec![1.0, -2.0];
        let ok: Vec<(Option<f64>, Option<f64>)> =
            vec![(Some(1.0), Some(2.0)), (Some(2.0), Some(5.0))];
        assert!(r_squared(&ok, Some(&weights)).is_err());
    }

    #[test]
    fn ols_matches_pearson_squared_for_simple_regression() {
        let mut rng = Rng::seed(56);
        let pairs: Vec<(Option<f64>, Option<f64>)> = (0..30)
            .map(|_| {
                let x = rng.uniform(0.0, 100.0);
                (Some(x), Some(0.8 * x + rng.uniform(-10.0, 10.0)))
            })
            .collect();
        let rep = r_squared(&pairs, None).unwrap();
        assert!((rep.r_squared - rep.pearson_r_squared).abs() < 1e-9);
    }
}
