//! `knn-eval`: the k-sweep over frozen embeddings with a seeded
//! train/validation split (or pre-split files).

use std::path::PathBuf;

use geosdg_core::knn::{sweep_k, EmbeddingRow, KnnIndex};
use geosdg_core::rng::Rng;

use crate::errors::{CmdError, CmdResult};
use crate::formats::csvio::{read_embeddings, write_sweep};
use crate::log;

pub struct KnnEvalArgs {
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub split: f64,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub normalize: bool,
    pub out: PathBuf,
}

fn labeled_rows(path: &std::path::Path) -> CmdResult<(geosdg_core::knn::Task, Vec<EmbeddingRow>)> {
    let file = read_embeddings(path)?;
    if !file.unlabeled.is_empty() {
        log(format!(
            "knn-eval: ignoring {} unlabeled rows in {}",
            file.unlabeled.len(),
            path.display()
        ));
    }
    let task = file
        .task
        .ok_or_else(|| CmdError::ingest(format!("{}: no rows", path.display())))?;
    if file.labeled.is_empty() {
        return Err(CmdError::ingest(format!(
            "{}: no labeled rows to evaluate",
            path.display()
        )));
    }
    Ok((task, file.labeled))
}

pub fn run(args: &KnnEvalArgs) -> CmdResult<usize> {
    let (task, train_rows, val_rows) = match (&args.embeddings, &args.train, &args.validation) {
        (Some(path), None, None) => {
            if !(0.0 < args.split && args.split < 1.0) {
                return Err(CmdError::config(format!(
                    "split fraction {} must be in (0, 1)",
                    args.split
                )));
            }
            let (task, rows) = labeled_rows(path)?;
            let n = rows.len();
            let n_train = ((n as f64) * args.split).floor() as usize;
            if n_train == 0 || n_train == n {
                return Err(CmdError::config(format!(
                    "split {} leaves an empty side for {n} rows",
                    args.split
                )));
            }
            let perm = Rng::derive(args.seed, "split", 0).permutation(n);
            let train: Vec<EmbeddingRow> =
                perm[..n_train].iter().map(|&i| rows[i].clone()).collect();
            let val: Vec<EmbeddingRow> =
                perm[n_train..].iter().map(|&i| rows[i].clone()).collect();
            (task, train, val)
        }
        (None, Some(train_path), Some(val_path)) => {
            let (task, train) = labeled_rows(train_path)?;
            let (vtask, val) = labeled_rows(val_path)?;
            if task != vtask {
                return Err(CmdError::config(format!(
                    "train task {task:?} differs from validation task {vtask:?}"
                )));
            }
            (task, train, val)
        }
        _ => {
            return Err(CmdError::config(
                "pass either --embeddings with --split, or both --train and --validation",
            ))
        }
    };

    for &k in &args.ks {
        if k == 0 || k > train_rows.len() {
            return Err(CmdError::config(format!(
                "k = {k} outside 1..={} (training rows)",
                train_rows.len()
            )));
        }
    }

    let index = KnnIndex::build(train_rows, task, args.normalize)?;
    if index.is_degenerate() {
        log("knn-eval: training labels are single-class (degenerate index)");
    }
    let sweep = sweep_k(&index, &val_rows, &args.ks)?;
    write_sweep(&args.out, &sweep)?;
    for row in &sweep.rows {
        log(format!(
            "knn-eval: k={} accuracy={:.4} f1={:.4}",
            row.k, row.metrics.accuracy, row.metrics.f1
        ));
    }
    println!("best_k={}", sweep.best_k);
    Ok(sweep.best_k)
}
