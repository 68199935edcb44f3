//! Transfer correction on the target: a sparse shift around the aggregated
//! source estimate, fitted jointly with the corruption vector, followed by
//! hard thresholding.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CorruptionVector, LabeledDataset, SparseCoefficients};
use crate::solver::{
    robust_lasso_fit, robust_lasso_fit_warm, RobustLassoFit, RobustLassoProblem, SolverError,
    SolverSettings,
};

/// Scale factor making the MAD consistent for a Gaussian standard deviation.
pub const MAD_CONSISTENCY: f64 = 1.4826;

/// Minimum number of uncorrupted rows for a noise-scale estimate.
pub const MIN_CLEAN_ROWS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate residuals: {0}")]
    DegenerateResiduals(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaleMethod {
    /// MAD of the residuals on rows with no estimated corruption.
    MadCleanRows,
    /// Chosen by cross-validation of penalised fits.
    CrossValidated,
    /// Provided by the caller.
    UserSupplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScaleEstimate {
    pub sigma_hat: f64,
    pub method: NoiseScaleMethod,
    pub rows_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFit {
    pub beta_source: SparseCoefficients,
    pub delta: SparseCoefficients,
    pub corruption: CorruptionVector,
    pub beta_final: SparseCoefficients,
    pub beta_thresholded: SparseCoefficients,
    pub threshold_used: f64,
    pub lambda_delta: f64,
    pub lambda_e: f64,
}

/// Fits `(delta, e)` on the target with the coefficients centred on `beta_source`.
pub fn fit_delta(
    target: &LabeledDataset,
    beta_source: ArrayView1<f64>,
    lambda_delta: f64,
    lambda_e: f64,
    settings: &SolverSettings,
) -> Result<RobustLassoFit, TransferError> {
    fit_delta_warm(target, beta_source, lambda_delta, lambda_e, settings, None)
}

pub fn fit_delta_warm(
    target: &LabeledDataset,
    beta_source: ArrayView1<f64>,
    lambda_delta: f64,
    lambda_e: f64,
    settings: &SolverSettings,
    init: Option<ArrayView1<f64>>,
) -> Result<RobustLassoFit, TransferError> {
    if beta_source.len() != target.n_features() {
        return Err(TransferError::LengthMismatch(
            beta_source.len(),
            target.n_features(),
        ));
    }
    let problem = RobustLassoProblem::new(
        target.design().view(),
        target.response().view(),
        lambda_delta,
        lambda_e,
    )
    .with_beta_offset(beta_source);
    let fit = match init {
        Some(w) => robust_lasso_fit_warm(&problem, settings, Some(w))?,
        None => robust_lasso_fit(&problem, settings)?,
    };
    Ok(fit)
}

pub fn assemble(
    beta_source: &SparseCoefficients,
    delta: &SparseCoefficients,
) -> Result<SparseCoefficients, TransferError> {
    if beta_source.len() != delta.len() {
        return Err(TransferError::LengthMismatch(
            beta_source.len(),
            delta.len(),
        ));
    }
    Ok(SparseCoefficients::from_dense(
        beta_source.values() + delta.values(),
    ))
}

/// Keeps entries with `|value| >= gamma`, zeroing the rest.
pub fn hard_threshold(beta: &SparseCoefficients, gamma: f64) -> SparseCoefficients {
    SparseCoefficients::from_dense(
        beta.values()
            .mapv(|v| if v.abs() >= gamma { v } else { 0.0 }),
    )
}

/// Data-driven threshold
/// `9 s sqrt(log p / n0) + 12 s lambda_t + 3 lambda_t + 4 s lambda_delta + lambda_delta`
/// with `s` the estimated noise scale.
pub fn compute_tn(sigma: f64, n0: usize, p: usize, lambda_t: f64, lambda_delta: f64) -> f64 {
    let base = ((p as f64).ln() / n0 as f64).sqrt();
    9.0 * sigma * base
        + 12.0 * sigma * lambda_t
        + 3.0 * lambda_t
        + 4.0 * sigma * lambda_delta
        + lambda_delta
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Normalised MAD of a sample.
pub fn mad_scale(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|r| (r - med).abs()).collect();
    MAD_CONSISTENCY * median(&mut dev)
}

/// Residual scale on rows where the corruption estimate is zero.
pub fn estimate_sigma(
    target: &LabeledDataset,
    beta: ArrayView1<f64>,
    corruption: ArrayView1<f64>,
) -> Result<NoiseScaleEstimate, TransferError> {
    let n = target.n_obs();
    if corruption.len() != n {
        return Err(TransferError::LengthMismatch(corruption.len(), n));
    }
    if beta.len() != target.n_features() {
        return Err(TransferError::LengthMismatch(
            beta.len(),
            target.n_features(),
        ));
    }
    let sqrt_n = (n as f64).sqrt();
    let fitted = target.design().dot(&beta);
    let clean: Vec<f64> = (0..n)
        .filter(|&i| corruption[i] == 0.0)
        .map(|i| target.response()[i] - fitted[i] - sqrt_n * corruption[i])
        .collect();
    if clean.len() < MIN_CLEAN_ROWS {
        return Err(TransferError::DegenerateResiduals(format!(
            "only {} clean rows (need {MIN_CLEAN_ROWS})",
            clean.len()
        )));
    }
    let sigma_hat = mad_scale(&clean);
    if !(sigma_hat > 0.0) {
        return Err(TransferError::DegenerateResiduals(
            "residual MAD is zero".into(),
        ));
    }
    Ok(NoiseScaleEstimate {
        sigma_hat,
        method: NoiseScaleMethod::MadCleanRows,
        rows_used: clean.len(),
    })
}

/// Builds the full transfer result from a `(delta, e)` fit.
pub fn finish(
    beta_source: SparseCoefficients,
    fit: RobustLassoFit,
    threshold: f64,
    lambda_delta: f64,
    lambda_e: f64,
) -> Result<TransferFit, TransferError> {
    let beta_final = assemble(&beta_source, &fit.coefficients)?;
    let beta_thresholded = hard_threshold(&beta_final, threshold);
    Ok(TransferFit {
        beta_source,
        delta: fit.coefficients,
        corruption: fit.corruption,
        beta_final,
        beta_thresholded,
        threshold_used: threshold,
        lambda_delta,
        lambda_e,
    })
}

/// Threshold for flagging corruption entries: `C * sigma * sqrt(log n / n)`.
pub fn corruption_threshold(c_tilde: f64, sigma: f64, n: usize) -> f64 {
    c_tilde * sigma * ((n as f64).ln() / n as f64).sqrt()
}
