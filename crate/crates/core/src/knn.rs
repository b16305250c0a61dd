//! Frozen-embedding k-nearest-neighbor classification, the k-sweep
//! protocol, and binary classification metrics.
//!
//! Distances are Euclidean, computed on 32-bit embeddings with 64-bit
//! accumulation. All tie rules are deterministic and independent of
//! row insertion order: candidates sort by (distance, row id), vote
//! ties fall back to the single nearest neighbor, and exact distance
//! ties resolve toward the smallest row id.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Default k-sweep domain for neighborhood-size selection.
pub const DEFAULT_KS: [usize; 5] = [5, 10, 50, 100, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    PipedWater,
    Sewage,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::PipedWater => "piped_water",
            Task::Sewage => "sewage",
        }
    }

    /// Compact name used in the scatter export.
    pub fn short_str(self) -> &'static str {
        match self {
            Task::PipedWater => "piped",
            Task::Sewage => "sewage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "piped_water" => Ok(Task::PipedWater),
            "sewage" => Ok(Task::Sewage),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

/// One labeled embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: bool,
    pub embedding: Vec<f32>,
}

/// Immutable index over labeled embeddings.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    task: Task,
    dim: usize,
    data: Vec<f32>,
    labels: Vec<bool>,
    ids: Vec<String>,
    normalized: bool,
    degenerate: bool,
}

fn l2_normalize(v: &mut [f32]) {
    let ss: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    if ss > 0.0 {
        let inv = 1.0 / libm::sqrt(ss);
        for x in v.iter_mut() {
            *x = (*x as f64 * inv) as f32;
        }
    }
}

impl KnnIndex {
    /// Builds an index; insertion order is preserved but never affects
    /// predictions. A single-class label set is accepted and flagged.
    pub fn build(rows: Vec<EmbeddingRow>, task: Task, normalize: bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot build an index over zero rows"));
        }
        let dim = rows[0].embedding.len();
        if dim == 0 {
            return Err(Error::shape("embedding dimension must be non-zero"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        for r in &rows {
            if r.embedding.len() != dim {
                return Err(Error::shape(format!(
                    "row '{}' has dim {}, index has {dim}",
                    r.id,
                    r.embedding.len()
                )));
            }
            let mut e = r.embedding.clone();
            if normalize {
                l2_normalize(&mut e);
            }
            data.extend_from_slice(&e);
            labels.push(r.label);
            ids.push(r.id.clone());
        }
        let degenerate = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
        Ok(KnnIndex {
            task,
            dim,
            data,
            labels,
            ids,
            normalized: normalize,
            degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// True when every row carries the same label.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Squared Euclidean distance: 32-bit differences, 64-bit accumulation.
fn sq_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += (d as f64) * (d as f64);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub label: bool,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: bool,
    pub votes_positive: usize,
    pub votes_negative: usize,
    pub neighbors: Vec<Neighbor>,
}

/// Majority vote among the k nearest rows.
pub fn classify(index: &KnnIndex, query: &[f32], k: usize) -> Result<Classification> {
    if k < 1 || k > index.len() {
        return Err(Error::config(format!(
            "k = {k} outside 1..={}",
            index.len()
        )));
    }
    if query.len() != index.dim() {
        return Err(Error::shape(format!(
            "query dim {} vs index dim {}",
            query.len(),
            index.dim()
        )));
    }
    let mut q = query.to_vec();
    if index.normalized {
        l2_normalize(&mut q);
    }

    let mut candidates: Vec<(f64, usize)> = (0..index.len())
        .map(|i| (sq_distance(&q, index.row(i)), i))
        .collect();
    // total order: distance, then row id -- insertion order never leaks
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then_with(|| index.ids[a.1].cmp(&index.ids[b.1]))
    });

    let top = &candidates[..k];
    let votes_positive = top.iter().filter(|&&(_, i)| index.labels[i]).count();
    let votes_negative = k - votes_positive;
    let label = match votes_positive.cmp(&votes_negative) {
        core::cmp::Ordering::Greater => true,
        core::cmp::Ordering::Less => false,
        // vote tie: the single nearest neighbor decides; the sort
        // already placed the smallest id first among distance ties
        core::cmp::Ordering::Equal => index.labels[top[0].1],
    };
    let neighbors = top
        .iter()
        .map(|&(d, i)| Neighbor {
            id: index.ids[i].clone(),
            label: index.labels[i],
            distance: libm::sqrt(d),
        })
        .collect();
    Ok(Classification {
        label,
        votes_positive,
        votes_negative,
        neighbors,
    })
}

/// Confusion-count metrics; the positive class is "has access".
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Option<Task>,
    pub k: Option<usize>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when precision, recall, or f1 had a zero denominator and
    /// was reported as 0 by convention.
    pub zero_denominator: bool,
}

pub fn evaluate(predictions: &[bool], truth: &[bool]) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("cannot evaluate zero predictions"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let mut zero = false;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        zero = true;
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        zero = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero = true;
        0.0
    };
    Ok(MetricsReport {
        task: None,
        k: None,
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / total,
        precision,
        recall,
        f1,
        zero_denominator: zero,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Highest accuracy; ties broken by f1, then by the smaller k.
    pub best_k: usize,
}

/// Runs the k-sweep over a labeled validation set whose row ids are
/// disjoint from the index.
pub fn sweep_k(index: &KnnIndex, validation: &[EmbeddingRow], ks: &[usize]) -> Result<SweepResult> {
    if validation.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    if ks.is_empty() {
        return Err(Error::config("no k values supplied"));
    }
    for v in validation {
        if index.ids.iter().any(|id| id == &v.id) {
            return Err(Error::invalid(format!(
                "validation row '{}' also present in the index",
                v.id
            )));
        }
    }
    let truth: Vec<bool> = validation.iter().map(|v| v.label).collect();
    let mut rows = Vec::with_capacity(ks.len());
    let mut best: Option<(f64, f64, usize)> = None;
    for &k in ks {
        let mut preds = Vec::with_capacity(validation.len());
        for v in validation {
            preds.push(classify(index, &v.embedding, k)?.label);
        }
        let mut metrics = evaluate(&preds, &truth)?;
        metrics.k = Some(k);
        metrics.task = Some(index.task);
        let candidate = (metrics.accuracy, metrics.f1, k);
        let better = match best {
            None => true,
            Some((acc, f1, bk)) => {
                candidate.0 > acc
                    || (candidate.0 == acc && candidate.1 > f1)
                    || (candidate.0 == acc && candidate.1 == f1 && k < bk)
            }
        };
        if better {
            best = Some(candidate);
        }
        rows.push(SweepRow { k, metrics });
    }
    Ok(SweepResult {
        rows,
        best_k: best.expect("at least one k").2,
    })
}
