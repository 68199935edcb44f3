//! End-to-end runs: source screening, aggregation, penalty tuning, transfer
//! correction and thresholding, plus the target-only baselines.

use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    column_record, validate_panel, DataError, LabeledDataset, SparseCoefficients,
    StandardizationRecord,
};
use crate::edsl::{edsl_aggregate, AnchorPolicy, EdslConfig, EdslError, EdslTrace};
use crate::selection::{
    aht_tune, default_robust_penalties, estimate_corruption_count, estimate_shifts, kfold_split,
    sds_select, AhtDecision, AhtOptions, SelectionError, SelectionResult, ShiftPenalties,
    SourceFailure, TuningGrid,
};
use crate::solver::{
    lambda_max, lasso_fit, lasso_fit_warm, robust_lasso_fit, robust_lasso_fit_warm, LassoFit,
    LassoProblem, RobustLassoProblem, SolverError, SolverSettings,
};
use crate::transfer::{
    assemble, compute_tn, fit_delta, hard_threshold, median, NoiseScaleEstimate, NoiseScaleMethod,
    TransferError, TransferFit,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    NoiseScale,
    Selection,
    Aggregation,
    Tuning,
    Transfer,
    Fallback,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Prepare => "prepare",
            Stage::NoiseScale => "noise_scale",
            Stage::Selection => "selection",
            Stage::Aggregation => "aggregation",
            Stage::Tuning => "tuning",
            Stage::Transfer => "transfer",
            Stage::Fallback => "fallback",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{stage}: solver failed: {source}")]
    Solver {
        stage: Stage,
        #[source]
        source: SolverError,
    },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Self::Solver { stage, .. } | Self::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    fn from_solver(stage: Stage, source: SolverError) -> Self {
        Self::Solver { stage, source }
    }

    fn from_selection(stage: Stage, err: SelectionError) -> Self {
        match err {
            SelectionError::Solver(source) => Self::Solver { stage, source },
            SelectionError::Transfer(t) => Self::from_transfer(stage, t),
            other => Self::Stage {
                stage,
                message: other.to_string(),
            },
        }
    }

    fn from_transfer(stage: Stage, err: TransferError) -> Self {
        match err {
            TransferError::Solver(source) => Self::Solver { stage, source },
            other => Self::Stage {
                stage,
                message: other.to_string(),
            },
        }
    }

    fn from_edsl(err: EdslError) -> Self {
        match err {
            EdslError::Solver { source, .. } => Self::Solver {
                stage: Stage::Aggregation,
                source,
            },
            other => Self::Stage {
                stage: Stage::Aggregation,
                message: other.to_string(),
            },
        }
    }
}

/// How the final estimate is hard-thresholded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ThresholdRule {
    /// No thresholding.
    None,
    /// Fixed level in original coefficient units.
    Fixed { gamma: f64 },
    /// `factor * t_n`, with `t_n` evaluated on standardized columns and
    /// divided by the median column scale.
    Tn { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Admission bound on the estimated shift.
    pub h: f64,
    /// Most sources admitted; `None` admits all that pass `h`.
    pub a_cap: Option<usize>,
    /// Corruption count above which tuning validates on a source.
    pub c_h: usize,
    /// Budget on `||delta||_1` when validating on a source; `None` derives it
    /// from the noise level.
    pub shift_budget: Option<f64>,
    /// Multiplier of the derived budget `s sqrt(k log p / n)`.
    pub shift_budget_c: f64,
    /// Detection constant for counting corrupted rows.
    pub detection_c: f64,
    pub threshold: ThresholdRule,
    pub folds: usize,
    pub lambda_delta_grid: Vec<f64>,
    pub lambda_e_grid: Vec<f64>,
    pub shift_penalties: ShiftPenalties,
    pub edsl: EdslConfig,
    pub solver: SolverSettings,
    /// Known noise level; estimated when absent.
    pub sigma: Option<f64>,
    pub scale_columns: bool,
    pub center_columns: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mult = vec![0.25, 0.5, 1.0, 2.0, 4.0];
        Self {
            h: 10.0,
            a_cap: None,
            c_h: 10,
            shift_budget: None,
            shift_budget_c: 2.0,
            detection_c: 3.0,
            threshold: ThresholdRule::None,
            folds: 5,
            lambda_delta_grid: mult.clone(),
            lambda_e_grid: mult,
            shift_penalties: ShiftPenalties::default(),
            edsl: EdslConfig::default(),
            solver: SolverSettings::default(),
            sigma: None,
            scale_columns: true,
            center_columns: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.h >= 0.0) {
            return bad("h must be >= 0");
        }
        if self.a_cap == Some(0) {
            return bad("a_cap must be >= 1");
        }
        if self.folds < 2 {
            return bad("folds must be >= 2");
        }
        if !(self.shift_budget_c >= 0.0) || !(self.detection_c >= 0.0) {
            return bad("shift_budget_c and detection_c must be >= 0");
        }
        if let Some(b) = self.shift_budget {
            if !(b >= 0.0) {
                return bad("shift_budget must be >= 0");
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return bad("sigma must be positive");
            }
        }
        match self.threshold {
            ThresholdRule::Fixed { gamma } if !(gamma >= 0.0) => {
                return bad("threshold gamma must be >= 0")
            }
            ThresholdRule::Tn { factor } if !(factor >= 0.0) => {
                return bad("threshold factor must be >= 0")
            }
            _ => {}
        }
        if self.lambda_delta_grid.is_empty() || self.lambda_e_grid.is_empty() {
            return bad("tuning grids must be nonempty");
        }
        if self
            .lambda_delta_grid
            .iter()
            .chain(&self.lambda_e_grid)
            .any(|m| !(*m > 0.0) || !m.is_finite())
        {
            return bad("tuning grid multipliers must be positive");
        }
        self.solver
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Oracle,
    Rtl,
    FallbackTargetOnly,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub noise_scale: f64,
    pub selection: f64,
    pub aggregation: f64,
    pub tuning: f64,
    pub transfer: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdslOutput {
    pub estimate: SparseCoefficients,
    pub trace: EdslTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub mode: RunMode,
    pub selection: SelectionResult,
    pub shift_failures: Vec<SourceFailure>,
    pub edsl: Option<EdslOutput>,
    pub tuning: Option<AhtDecision>,
    /// Coefficients in original column units. The corruption vector is on
    /// the fitting scale: the label offset of row `i` is `sqrt(n) e_i`.
    pub transfer: TransferFit,
    pub sigma: NoiseScaleEstimate,
    pub standardization: StandardizationRecord,
    pub config: PipelineConfig,
    pub timings: StageTimings,
}

impl FitReport {
    pub fn estimate(&self) -> &SparseCoefficients {
        &self.transfer.beta_thresholded
    }

    /// JSON with timings zeroed, stable across identical runs.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.timings = StageTimings::default();
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

/// Target and sources with columns rescaled by the target's column scales.
#[derive(Debug, Clone)]
pub struct PreparedPanel {
    pub target: LabeledDataset,
    pub sources: Vec<LabeledDataset>,
    pub record: StandardizationRecord,
}

impl PreparedPanel {
    fn median_scale(&self) -> f64 {
        let mut s = self.record.column_scales.clone();
        median(&mut s)
    }

    fn to_original(&self, beta: &Array1<f64>) -> SparseCoefficients {
        SparseCoefficients::from_dense(self.record.coefficients_to_original(beta.view()))
    }
}

/// Rescales every dataset with the target's column statistics. With
/// centering on, each dataset is centred on its own column means.
pub fn prepare_panel(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
    config: &PipelineConfig,
) -> Result<PreparedPanel, PipelineError> {
    validate_panel(target, sources)?;
    let p = target.n_features();
    if !config.scale_columns && !config.center_columns {
        return Ok(PreparedPanel {
            target: target.clone(),
            sources: sources.to_vec(),
            record: StandardizationRecord::identity(p),
        });
    }
    let record = column_record(target.design(), config.center_columns, config.scale_columns)?;
    let rescale = |d: &LabeledDataset| -> Result<LabeledDataset, DataError> {
        let own = column_record(d.design(), config.center_columns, false)?;
        let r = StandardizationRecord {
            column_means: own.column_means,
            column_scales: record.column_scales.clone(),
        };
        Ok(d.with_design(r.apply(d.design())))
    };
    Ok(PreparedPanel {
        target: rescale(target)?,
        sources: sources.iter().map(rescale).collect::<Result<_, _>>()?,
        record,
    })
}

const PATH_LEN: usize = 40;
const PATH_RATIO: f64 = 1e-2;
const SIGMA_GRID_LEN: usize = 24;
const SIGMA_GRID_RATIO: f64 = 1e-2;
/// Fraction of held-out squared residuals kept by the robust CV score.
const ROBUST_CV_KEEP: f64 = 0.25;

fn geometric(top: f64, ratio: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| top * ratio.powf(k as f64 / (len - 1) as f64))
        .collect()
}

fn train_test(data: &LabeledDataset, fold: &[usize]) -> (LabeledDataset, LabeledDataset) {
    let n = data.n_obs();
    let mut held = vec![false; n];
    for &i in fold {
        held[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !held[i]).collect();
    (data.select_rows(&train), data.select_rows(fold))
}

/// Lasso with the penalty minimising k-fold held-out squared error over a
/// geometric path from `lambda_max` down to `lambda_max / 100`. Returns the
/// fit and its penalty.
pub fn lasso_cv_fit(
    data: &LabeledDataset,
    folds: usize,
    seed: u64,
    settings: &SolverSettings,
) -> Result<(LassoFit, f64), PipelineError> {
    let n = data.n_obs();
    let top = lambda_max(data.design().view(), data.response().view(), None);
    if !(top > 0.0) {
        let fit = lasso_fit(
            &LassoProblem::new(data.design().view(), data.response().view(), 0.0),
            settings,
        )
        .map_err(|e| PipelineError::from_solver(Stage::Tuning, e))?;
        return Ok((fit, 0.0));
    }
    let path = geometric(top, PATH_RATIO, PATH_LEN);
    let splits =
        kfold_split(n, folds, seed).map_err(|e| PipelineError::from_selection(Stage::Tuning, e))?;
    let per_fold: Vec<Vec<f64>> = splits
        .par_iter()
        .map(|fold| {
            let (train, test) = train_test(data, fold);
            let mut errors = vec![f64::INFINITY; PATH_LEN];
            let mut warm: Option<Array1<f64>> = None;
            for (k, &lambda) in path.iter().enumerate() {
                let fit = lasso_fit_warm(
                    &LassoProblem::new(train.design().view(), train.response().view(), lambda),
                    settings,
                    warm.as_ref().map(|w| w.view()),
                )
                .map_err(|e| PipelineError::from_solver(Stage::Tuning, e))?;
                let r = test.response() - &test.design().dot(fit.coefficients.values());
                errors[k] = r.dot(&r);
                // past saturation the path only interpolates
                let saturated = fit.coefficients.nnz() + 1 >= train.n_obs();
                warm = Some(fit.coefficients.into_values());
                if saturated {
                    break;
                }
            }
            Ok(errors)
        })
        .collect::<Result<_, PipelineError>>()?;
    let best = (0..PATH_LEN)
        .map(|k| per_fold.iter().map(|f| f[k]).sum::<f64>())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
        .expect("nonempty path");
    let fit = lasso_fit(
        &LassoProblem::new(data.design().view(), data.response().view(), path[best]),
        settings,
    )
    .map_err(|e| PipelineError::from_solver(Stage::Tuning, e))?;
    Ok((fit, path[best]))
}

/// Residual scale of the cross-validated Lasso, `sqrt(RSS / (n - df))`.
pub fn lasso_noise_scale(
    data: &LabeledDataset,
    folds: usize,
    seed: u64,
    settings: &SolverSettings,
) -> Result<f64, PipelineError> {
    let (fit, _) = lasso_cv_fit(data, folds, seed, settings)?;
    let r = data.response() - &data.design().dot(fit.coefficients.values());
    let dof = data.n_obs().saturating_sub(fit.coefficients.nnz()).max(1);
    let sigma = (r.dot(&r) / dof as f64).sqrt();
    if !(sigma > 0.0) {
        return Err(PipelineError::Stage {
            stage: Stage::NoiseScale,
            message: format!("zero residual scale on `{}`", data.id()),
        });
    }
    Ok(sigma)
}

/// Noise level of possibly corrupted data: the `s` whose robust fit at
/// [`default_robust_penalties`] minimises a trimmed k-fold score (mean of the
/// smallest quarter of held-out squared residuals).
pub fn robust_noise_scale(
    data: &LabeledDataset,
    folds: usize,
    seed: u64,
    settings: &SolverSettings,
) -> Result<NoiseScaleEstimate, PipelineError> {
    let n = data.n_obs();
    let p = data.n_features();
    let y = data.response();
    let top = y.dot(y).sqrt() / (n as f64).sqrt();
    if !(top > 0.0) {
        return Err(PipelineError::Stage {
            stage: Stage::NoiseScale,
            message: "response is identically zero".into(),
        });
    }
    let grid = geometric(top, SIGMA_GRID_RATIO, SIGMA_GRID_LEN);
    let splits = kfold_split(n, folds, seed)
        .map_err(|e| PipelineError::from_selection(Stage::NoiseScale, e))?;
    let per_fold: Vec<Vec<Vec<f64>>> = splits
        .par_iter()
        .map(|fold| {
            let (train, test) = train_test(data, fold);
            let mut warm: Option<Array1<f64>> = None;
            let mut out = Vec::with_capacity(grid.len());
            for &s in &grid {
                let (lb, le) = default_robust_penalties(s, train.n_obs(), p);
                let fit = robust_lasso_fit_warm(
                    &RobustLassoProblem::new(
                        train.design().view(),
                        train.response().view(),
                        lb,
                        le,
                    ),
                    settings,
                    warm.as_ref().map(|w| w.view()),
                )
                .map_err(|e| PipelineError::from_solver(Stage::NoiseScale, e))?;
                let r = test.response() - &test.design().dot(fit.coefficients.values());
                out.push(r.mapv(|v| v * v).to_vec());
                warm = Some(fit.coefficients.into_values());
            }
            Ok(out)
        })
        .collect::<Result<_, PipelineError>>()?;
    let keep = ((n as f64 * ROBUST_CV_KEEP).ceil() as usize).max(1);
    let scores: Vec<f64> = (0..grid.len())
        .map(|k| {
            let mut all: Vec<f64> = per_fold.iter().flat_map(|f| f[k].iter().copied()).collect();
            all.sort_by(f64::total_cmp);
            all[..keep].iter().sum::<f64>() / keep as f64
        })
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
        .expect("nonempty grid");
    Ok(NoiseScaleEstimate {
        sigma_hat: grid[best],
        method: NoiseScaleMethod::CrossValidated,
        rows_used: n,
    })
}

/// Noise level for tuning: user value, else the median over the clean
/// sources, else a robust estimate on the target.
pub fn panel_noise_scale(
    panel: &PreparedPanel,
    config: &PipelineConfig,
) -> Result<NoiseScaleEstimate, PipelineError> {
    if let Some(s) = config.sigma {
        return Ok(NoiseScaleEstimate {
            sigma_hat: s,
            method: NoiseScaleMethod::UserSupplied,
            rows_used: 0,
        });
    }
    if panel.sources.is_empty() {
        return robust_noise_scale(&panel.target, config.folds, config.seed, &config.solver);
    }
    let mut per_source = panel
        .sources
        .par_iter()
        .map(|s| lasso_noise_scale(s, config.folds, config.seed, &config.solver))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(NoiseScaleEstimate {
        sigma_hat: median(&mut per_source),
        method: NoiseScaleMethod::CrossValidated,
        rows_used: panel.sources.iter().map(LabeledDataset::n_obs).sum(),
    })
}

fn threshold_level(
    config: &PipelineConfig,
    panel: &PreparedPanel,
    sigma: f64,
    lambda_t: f64,
    lambda_delta: f64,
) -> f64 {
    match config.threshold {
        ThresholdRule::None => 0.0,
        ThresholdRule::Fixed { gamma } => gamma,
        ThresholdRule::Tn { factor } => {
            let t = compute_tn(
                sigma,
                panel.target.n_obs(),
                panel.target.n_features(),
                lambda_t,
                lambda_delta,
            );
            factor * t / panel.median_scale()
        }
    }
}

/// Derived shift budget `c s sqrt(k log p / n)` in original units, `k` the
/// support size of the aggregate.
pub fn derived_shift_budget(
    config: &PipelineConfig,
    panel: &PreparedPanel,
    sigma: f64,
    support: usize,
) -> f64 {
    if let Some(b) = config.shift_budget {
        return b;
    }
    let n = panel.target.n_obs() as f64;
    let p = panel.target.n_features() as f64;
    let k = support.max(1) as f64;
    config.shift_budget_c * sigma * (k * p.ln() / n).sqrt() / panel.median_scale()
}

fn fallback(
    panel: &PreparedPanel,
    config: &PipelineConfig,
    sigma: NoiseScaleEstimate,
    selection: SelectionResult,
    shift_failures: Vec<SourceFailure>,
    mut timings: StageTimings,
    started: Instant,
) -> Result<FitReport, PipelineError> {
    let t = Instant::now();
    let (lb, le) = default_robust_penalties(
        sigma.sigma_hat,
        panel.target.n_obs(),
        panel.target.n_features(),
    );
    let fit = robust_lasso_fit(
        &RobustLassoProblem::new(
            panel.target.design().view(),
            panel.target.response().view(),
            lb,
            le,
        ),
        &config.solver,
    )
    .map_err(|e| PipelineError::from_solver(Stage::Fallback, e))?;
    let beta_source = SparseCoefficients::zeros(panel.target.n_features());
    let delta = panel.to_original(fit.coefficients.values());
    let beta_final = assemble(&beta_source, &delta)
        .map_err(|e| PipelineError::from_transfer(Stage::Fallback, e))?;
    let gamma = threshold_level(config, panel, sigma.sigma_hat, 0.0, lb);
    let transfer = TransferFit {
        beta_thresholded: hard_threshold(&beta_final, gamma),
        beta_source,
        delta,
        corruption: fit.corruption,
        beta_final,
        threshold_used: gamma,
        lambda_delta: lb,
        lambda_e: le,
    };
    timings.transfer = t.elapsed().as_secs_f64();
    timings.total = started.elapsed().as_secs_f64();
    Ok(FitReport {
        schema_version: SCHEMA_VERSION,
        mode: RunMode::FallbackTargetOnly,
        selection,
        shift_failures,
        edsl: None,
        tuning: None,
        transfer,
        sigma,
        standardization: panel.record.clone(),
        config: config.clone(),
        timings,
    })
}

/// Aggregation, tuning and transfer on an already chosen source set.
#[allow(clippy::too_many_arguments)]
fn transfer_stages(
    panel: &PreparedPanel,
    config: &PipelineConfig,
    sigma: NoiseScaleEstimate,
    selection: SelectionResult,
    shift_failures: Vec<SourceFailure>,
    shifts: Option<Vec<f64>>,
    mode: RunMode,
    mut timings: StageTimings,
    started: Instant,
) -> Result<FitReport, PipelineError> {
    let s = sigma.sigma_hat;
    let t = Instant::now();
    let mut edsl_config = config.edsl.clone();
    edsl_config.noise_scale = s;
    if edsl_config.anchor_policy == AnchorPolicy::MinShift
        && selection.selected.contains(&selection.validation_index)
    {
        edsl_config.anchor_policy = AnchorPolicy::Explicit(selection.validation_index);
    }
    let (aggregate, trace) = edsl_aggregate(
        &panel.sources,
        &selection.selected,
        &edsl_config,
        &config.solver,
        shifts.as_deref(),
    )
    .map_err(PipelineError::from_edsl)?;
    timings.aggregation = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let n = panel.target.n_obs();
    let p = panel.target.n_features();
    let screen = estimate_corruption_count(&panel.target, s, config.detection_c, &config.solver)
        .map_err(|e| PipelineError::from_selection(Stage::Tuning, e))?;
    let grid = TuningGrid::scaled(s, n, p, &config.lambda_delta_grid, &config.lambda_e_grid);
    let options = AhtOptions {
        c_h: config.c_h,
        shift_budget: derived_shift_budget(config, panel, s, aggregate.nnz()),
        folds: config.folds,
        seed: config.seed,
    };
    let tuning = aht_tune(
        &panel.target,
        &panel.sources,
        selection.validation_index,
        aggregate.values().view(),
        &grid,
        &screen,
        &options,
        &panel.record,
        &config.solver,
    )
    .map_err(|e| PipelineError::from_selection(Stage::Tuning, e))?;
    timings.tuning = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (ld, le) = tuning.chosen;
    let fit = fit_delta(
        &panel.target,
        aggregate.values().view(),
        ld,
        le,
        &config.solver,
    )
    .map_err(|e| PipelineError::from_transfer(Stage::Transfer, e))?;
    let beta_source = panel.to_original(aggregate.values());
    let delta = panel.to_original(fit.coefficients.values());
    let beta_final = assemble(&beta_source, &delta)
        .map_err(|e| PipelineError::from_transfer(Stage::Transfer, e))?;
    let gamma = threshold_level(config, panel, s, trace.final_lambda(), ld);
    let transfer = TransferFit {
        beta_thresholded: hard_threshold(&beta_final, gamma),
        beta_source: beta_source.clone(),
        delta,
        corruption: fit.corruption,
        beta_final,
        threshold_used: gamma,
        lambda_delta: ld,
        lambda_e: le,
    };
    timings.transfer = t.elapsed().as_secs_f64();
    timings.total = started.elapsed().as_secs_f64();

    Ok(FitReport {
        schema_version: SCHEMA_VERSION,
        mode,
        selection,
        shift_failures,
        edsl: Some(EdslOutput {
            estimate: beta_source,
            trace,
        }),
        tuning: Some(tuning),
        transfer,
        sigma,
        standardization: panel.record.clone(),
        config: config.clone(),
        timings,
    })
}

fn screen_sources(
    panel: &PreparedPanel,
    config: &PipelineConfig,
    sigma: f64,
) -> Result<(SelectionResult, Vec<SourceFailure>, Vec<f64>), PipelineError> {
    let table = estimate_shifts(
        &panel.target,
        &panel.sources,
        sigma,
        &config.shift_penalties,
        &panel.record,
        &config.solver,
    )
    .map_err(|e| PipelineError::from_selection(Stage::Selection, e))?;
    let a_cap = config.a_cap.unwrap_or(panel.sources.len());
    let selection = sds_select(&table.estimates, config.h, a_cap);
    let shifts = table.by_source(panel.sources.len());
    Ok((selection, table.failures, shifts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub sigma: NoiseScaleEstimate,
    pub selection: SelectionResult,
    pub shift_failures: Vec<SourceFailure>,
    pub config: PipelineConfig,
}

/// Source screening alone: the noise level and the admitted sources.
pub fn run_selection(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
    config: &PipelineConfig,
) -> Result<SelectionReport, PipelineError> {
    config.validate()?;
    if sources.is_empty() {
        return Err(PipelineError::Config(
            "selection needs at least one source".into(),
        ));
    }
    let panel = prepare_panel(target, sources, config)?;
    let sigma = panel_noise_scale(&panel, config)?;
    let (selection, shift_failures, _) = screen_sources(&panel, config, sigma.sigma_hat)?;
    Ok(SelectionReport {
        schema_version: SCHEMA_VERSION,
        sigma,
        selection,
        shift_failures,
        config: config.clone(),
    })
}

/// Full run: screen sources, then aggregate, tune and correct. Falls back to
/// a robust fit on the target when no source is admitted.
pub fn run_rtl(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
    config: &PipelineConfig,
) -> Result<FitReport, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    let panel = prepare_panel(target, sources, config)?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let sigma = panel_noise_scale(&panel, config)?;
    timings.noise_scale = t.elapsed().as_secs_f64();

    if panel.sources.is_empty() {
        let empty = SelectionResult {
            selected: Vec::new(),
            validation_index: 0,
            shift_table: Vec::new(),
        };
        return fallback(&panel, config, sigma, empty, Vec::new(), timings, started);
    }

    let t = Instant::now();
    let (selection, failures, shifts) = screen_sources(&panel, config, sigma.sigma_hat)?;
    timings.selection = t.elapsed().as_secs_f64();

    if selection.selected.is_empty() {
        return fallback(&panel, config, sigma, selection, failures, timings, started);
    }
    transfer_stages(
        &panel,
        config,
        sigma,
        selection,
        failures,
        Some(shifts),
        RunMode::Rtl,
        timings,
        started,
    )
}

/// Run on a known informative set. `known_shifts`, indexed by source, picks
/// the anchor and validation source; without it shifts are estimated.
pub fn run_oracle(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
    known: &[usize],
    known_shifts: Option<&[f64]>,
    config: &PipelineConfig,
) -> Result<FitReport, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    if known.is_empty() {
        return Err(PipelineError::Config("known source set is empty".into()));
    }
    if let Some(&bad) = known.iter().find(|&&j| j >= sources.len()) {
        return Err(PipelineError::Config(format!(
            "known source {bad} is out of range"
        )));
    }
    let panel = prepare_panel(target, sources, config)?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let sigma = panel_noise_scale(&panel, config)?;
    timings.noise_scale = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut selected = known.to_vec();
    selected.sort_unstable();
    selected.dedup();
    let (shifts, table, failures) = match known_shifts {
        Some(h) => {
            if h.len() != sources.len() {
                return Err(PipelineError::Config(format!(
                    "known_shifts has {} entries for {} sources",
                    h.len(),
                    sources.len()
                )));
            }
            (h.to_vec(), Vec::new(), Vec::new())
        }
        None => {
            let table = estimate_shifts(
                &panel.target,
                &panel.sources,
                sigma.sigma_hat,
                &config.shift_penalties,
                &panel.record,
                &config.solver,
            )
            .map_err(|e| PipelineError::from_selection(Stage::Selection, e))?;
            (
                table.by_source(sources.len()),
                table.estimates,
                table.failures,
            )
        }
    };
    let validation_index = *selected
        .iter()
        .min_by(|&&a, &&b| shifts[a].total_cmp(&shifts[b]).then(a.cmp(&b)))
        .expect("nonempty");
    let selection = SelectionResult {
        selected,
        validation_index,
        shift_table: table,
    };
    timings.selection = t.elapsed().as_secs_f64();
    transfer_stages(
        &panel,
        config,
        sigma,
        selection,
        failures,
        Some(shifts),
        RunMode::Oracle,
        timings,
        started,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub coefficients: SparseCoefficients,
    pub lambda: f64,
    pub lambda_e: Option<f64>,
    pub sigma: Option<f64>,
}

/// Target-only Lasso with a cross-validated penalty.
pub fn lasso_cv(
    target: &LabeledDataset,
    folds: usize,
    seed: u64,
    settings: &SolverSettings,
) -> Result<BaselineFit, PipelineError> {
    let panel = prepare_panel(target, &[], &PipelineConfig::default())?;
    let (fit, lambda) = lasso_cv_fit(&panel.target, folds, seed, settings)?;
    Ok(BaselineFit {
        coefficients: panel.to_original(fit.coefficients.values()),
        lambda,
        lambda_e: None,
        sigma: None,
    })
}

/// Target-only robust Lasso at `(s sqrt(2 log p / n), s sqrt(2 log n / n))`
/// with `s` from [`robust_noise_scale`].
pub fn rlasso(
    target: &LabeledDataset,
    folds: usize,
    seed: u64,
    settings: &SolverSettings,
) -> Result<BaselineFit, PipelineError> {
    let panel = prepare_panel(target, &[], &PipelineConfig::default())?;
    let data = &panel.target;
    let sigma = robust_noise_scale(data, folds, seed, settings)?.sigma_hat;
    let (lb, le) = default_robust_penalties(sigma, data.n_obs(), data.n_features());
    let fit = robust_lasso_fit(
        &RobustLassoProblem::new(data.design().view(), data.response().view(), lb, le),
        settings,
    )
    .map_err(|e| PipelineError::from_solver(Stage::Fallback, e))?;
    Ok(BaselineFit {
        coefficients: panel.to_original(fit.coefficients.values()),
        lambda: lb,
        lambda_e: Some(le),
        sigma: Some(sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate, SimDesign};

    fn small(seed: u64, r: f64) -> SimDesign {
        SimDesign {
            p: 100,
            n_target: 60,
            n_source: 60,
            num_sources: 3,
            target_sparsity: 5,
            shared_support_size: 5,
            source_sparsity_alt: 8,
            corruption_fraction: r,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn no_sources_falls_back_to_robust_fit() {
        let inst = generate(&small(1, 0.1)).unwrap();
        let cfg = PipelineConfig::default();
        let rep = run_rtl(&inst.target, &[], &cfg).unwrap();
        assert_eq!(rep.mode, RunMode::FallbackTargetOnly);
        assert!(rep.selection.selected.is_empty());

        let panel = prepare_panel(&inst.target, &[], &cfg).unwrap();
        let s = rep.sigma.sigma_hat;
        let (lb, le) = default_robust_penalties(s, 60, 100);
        let direct = robust_lasso_fit(
            &RobustLassoProblem::new(
                panel.target.design().view(),
                panel.target.response().view(),
                lb,
                le,
            ),
            &cfg.solver,
        )
        .unwrap();
        assert_eq!(
            rep.transfer.beta_final,
            panel.to_original(direct.coefficients.values())
        );
    }

    #[test]
    fn far_sources_are_screened_out() {
        let mut d = small(2, 0.1);
        d.shared_support_size = 0;
        d.shift_low = 20.0;
        d.shift_high = 20.0;
        let inst = generate(&d).unwrap();
        let cfg = PipelineConfig {
            h: 1.0,
            ..Default::default()
        };
        let rep = run_rtl(&inst.target, &inst.sources, &cfg).unwrap();
        assert_eq!(rep.mode, RunMode::FallbackTargetOnly);
        assert!(rep.selection.selected.is_empty());
    }

    #[test]
    fn report_is_deterministic_and_consistent() {
        let inst = generate(&small(3, 0.1)).unwrap();
        let cfg = PipelineConfig::default();
        let a = run_rtl(&inst.target, &inst.sources, &cfg).unwrap();
        let b = run_rtl(&inst.target, &inst.sources, &cfg).unwrap();
        assert_eq!(a.canonical_json(), b.canonical_json());
        assert_eq!(a.mode, RunMode::Rtl);
        let edsl = &a.edsl.as_ref().unwrap().estimate;
        assert_eq!(
            a.transfer.beta_final,
            assemble(edsl, &a.transfer.delta).unwrap()
        );
        let back: FitReport = serde_json::from_str(&a.canonical_json()).unwrap();
        assert_eq!(back.canonical_json(), a.canonical_json());
    }

    #[test]
    fn oracle_rejects_empty_set() {
        let inst = generate(&small(4, 0.1)).unwrap();
        assert!(matches!(
            run_oracle(
                &inst.target,
                &inst.sources,
                &[],
                None,
                &PipelineConfig::default()
            ),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn exact_source_gives_small_correction() {
        let mut d = small(5, 0.0);
        d.noise_sd = 0.0;
        d.num_sources = 1;
        d.alt_sparsity_probability = Some(0.0);
        let inst = generate(&d).unwrap();
        let cfg = PipelineConfig {
            sigma: Some(1e-3),
            ..Default::default()
        };
        let rep = run_oracle(&inst.target, &inst.sources, &[0], Some(&[0.0]), &cfg).unwrap();
        let err = (rep.transfer.beta_final.values() - inst.truth_beta.values())
            .mapv(f64::abs)
            .sum();
        assert!(
            rep.transfer.delta.l1_norm() < 0.05,
            "{}",
            rep.transfer.delta.l1_norm()
        );
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = PipelineConfig {
            folds: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
        let js = r#"{"h": 2.0, "solver": {"tol": 1e-8}}"#;
        let c: PipelineConfig = serde_json::from_str(js).unwrap();
        assert_eq!(c.h, 2.0);
        assert_eq!(c.solver.max_iters, SolverSettings::default().max_iters);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"hh": 1}"#).is_err());
    }
}
