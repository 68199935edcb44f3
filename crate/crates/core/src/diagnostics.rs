//! Reconstruction metrics and a covariate-similarity diagnostic.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("true signal is identically zero")]
    ZeroTruth,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("datasets have {0} and {1} columns")]
    ColumnMismatch(usize, usize),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
}

/// Signal-to-error ratio in decibels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SerScore {
    Finite(f64),
    /// The estimate matched the truth exactly.
    Infinite,
}

impl SerScore {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }

    /// The dB value, with exact recovery mapped to `f64::INFINITY`.
    pub fn db(&self) -> f64 {
        match self {
            Self::Finite(v) => *v,
            Self::Infinite => f64::INFINITY,
        }
    }
}

/// `10 log10(||x||^2 / ||x - x_hat||^2)`
pub fn ser_db(truth: ArrayView1<f64>, estimate: ArrayView1<f64>) -> Result<SerScore, MetricError> {
    if truth.len() != estimate.len() {
        return Err(MetricError::LengthMismatch(truth.len(), estimate.len()));
    }
    let signal: f64 = truth.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(MetricError::ZeroTruth);
    }
    let error: f64 = truth
        .iter()
        .zip(estimate.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if error == 0.0 {
        return Ok(SerScore::Infinite);
    }
    Ok(SerScore::Finite(10.0 * (signal / error).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub sign_match: bool,
    pub support_precision: f64,
    pub support_recall: f64,
    pub corruption_precision: f64,
    pub corruption_recall: f64,
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Precision and recall of `est`'s support against `truth`'s.
/// An empty prediction has precision 1; an empty truth has recall 1.
fn precision_recall(truth: ArrayView1<f64>, est: ArrayView1<f64>) -> (f64, f64) {
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut actual = 0usize;
    for (t, e) in truth.iter().zip(est.iter()) {
        let (t, e) = (*t != 0.0, *e != 0.0);
        tp += (t && e) as usize;
        predicted += e as usize;
        actual += t as usize;
    }
    let precision = if predicted == 0 {
        1.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if actual == 0 {
        1.0
    } else {
        tp as f64 / actual as f64
    };
    (precision, recall)
}

pub fn recovery_score(
    truth_beta: ArrayView1<f64>,
    est_beta: ArrayView1<f64>,
    truth_e: ArrayView1<f64>,
    est_e: ArrayView1<f64>,
) -> Result<RecoveryScore, MetricError> {
    if truth_beta.len() != est_beta.len() {
        return Err(MetricError::LengthMismatch(
            truth_beta.len(),
            est_beta.len(),
        ));
    }
    if truth_e.len() != est_e.len() {
        return Err(MetricError::LengthMismatch(truth_e.len(), est_e.len()));
    }
    let sign_match = truth_beta
        .iter()
        .zip(est_beta.iter())
        .all(|(a, b)| sign(*a) == sign(*b));
    let (support_precision, support_recall) = precision_recall(truth_beta, est_beta);
    let (corruption_precision, corruption_recall) = precision_recall(truth_e, est_e);
    Ok(RecoveryScore {
        sign_match,
        support_precision,
        support_recall,
        corruption_precision,
        corruption_recall,
    })
}

fn mean_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> f64 {
    let denom = 2.0 * bandwidth * bandwidth;
    let mut total = 0.0;
    for u in a.rows() {
        for v in b.rows() {
            let d2: f64 = u.iter().zip(v.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            total += (-d2 / denom).exp();
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Biased (V-statistic) MMD between the rows of `a` and `b` under a Gaussian
/// kernel of the given bandwidth. Returns the square root of the MMD^2 estimate.
pub fn mmd_rbf(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<f64, MetricError> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(MetricError::EmptyDataset);
    }
    if a.ncols() != b.ncols() {
        return Err(MetricError::ColumnMismatch(a.ncols(), b.ncols()));
    }
    if !(bandwidth > 0.0) {
        return Err(MetricError::BadBandwidth(bandwidth));
    }
    let mmd2 = mean_kernel(a, a, bandwidth) + mean_kernel(b, b, bandwidth)
        - 2.0 * mean_kernel(a, b, bandwidth);
    Ok(mmd2.max(0.0).sqrt())
}

/// Median pairwise distance over the pooled rows of `a` and `b`.
pub fn median_heuristic_bandwidth(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
) -> Result<f64, MetricError> {
    if a.ncols() != b.ncols() {
        return Err(MetricError::ColumnMismatch(a.ncols(), b.ncols()));
    }
    let pooled: Array2<f64> = ndarray::concatenate(ndarray::Axis(0), &[a, b])
        .map_err(|_| MetricError::ColumnMismatch(a.ncols(), b.ncols()))?;
    let m = pooled.nrows();
    if m < 2 {
        return Err(MetricError::EmptyDataset);
    }
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let d2: f64 = pooled
                .row(i)
                .iter()
                .zip(pooled.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        Ok(med)
    } else {
        Ok(1.0)
    }
}
