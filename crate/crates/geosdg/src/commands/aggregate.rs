//! `aggregate`: population-weighted national estimates from
//! per-location labels, plus optional urban/rural stratification.

use std::fmt::Write as _;
use std::path::PathBuf;

use geosdg_core::aggregate::{
    population_weighted_access, urban_rural_rates, CountryEstimate, LocationPrediction,
};
use geosdg_core::knn::Task;

use crate::errors::{CmdError, CmdResult};
use crate::formats::csvio::{
    read_locations, read_population, read_survey, write_estimates, write_urban_rural,
};
use crate::log;
use crate::write_atomic;

pub struct AggregateArgs {
    pub locations: Vec<PathBuf>,
    pub population: PathBuf,
    pub radius_km: f64,
    pub survey: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn run(args: &AggregateArgs) -> CmdResult<()> {
    if args.locations.is_empty() {
        return Err(CmdError::config("at least one --locations file required"));
    }
    let mut locations: Vec<LocationPrediction> = Vec::new();
    for path in &args.locations {
        locations.extend(read_locations(path)?);
    }
    let cells = read_population(&args.population)?;
    if cells.is_empty() {
        return Err(CmdError::ingest(format!(
            "{}: no population cells",
            args.population.display()
        )));
    }

    let mut tasks: Vec<Task> = locations.iter().map(|l| l.task).collect();
    tasks.sort();
    tasks.dedup();

    let mut estimates: Vec<CountryEstimate> = Vec::new();
    let mut coverage = String::from("task,excluded_cells,excluded_population,uncovered_countries\n");
    for task in tasks {
        let per_task: Vec<LocationPrediction> = locations
            .iter()
            .filter(|l| l.task == task)
            .cloned()
            .collect();
        let (mut est, report) =
            population_weighted_access(&per_task, &cells, args.radius_km * 1000.0)?;
        estimates.append(&mut est);
        writeln!(
            coverage,
            "{},{},{},{}",
            task.as_str(),
            report.excluded_cells,
            report.excluded_population,
            report.uncovered_countries.join(";")
        )
        .expect("string write");
        if !report.uncovered_countries.is_empty() {
            log(format!(
                "aggregate: {} countries had no covered population for {}",
                report.uncovered_countries.len(),
                task.as_str()
            ));
        }
    }
    estimates.sort_by(|a, b| a.country.cmp(&b.country).then(a.task.cmp(&b.task)));

    write_estimates(&args.out_dir.join("country_estimates.csv"), &estimates)?;
    write_atomic(&args.out_dir.join("coverage.csv"), coverage.as_bytes())?;
    log(format!("aggregate: wrote {} country estimates", estimates.len()));

    if let Some(path) = &args.survey {
        let survey = read_survey(path)?;
        let rows = urban_rural_rates(&survey)?;
        write_urban_rural(&args.out_dir.join("urban_rural.csv"), &rows)?;
        log(format!("aggregate: wrote {} stratified rate rows", rows.len()));
    }
    Ok(())
}
