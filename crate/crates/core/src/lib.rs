//! Robust transfer Lasso: sparse regression on a target dataset whose labels
//! may be adversarially corrupted, borrowing strength from clean source
//! datasets.
//!
//! The pipeline screens sources by an estimated coefficient shift, pools the
//! admitted sources with a communication-efficient distributed Lasso, then
//! fits a sparse correction and a per-observation corruption vector on the
//! target, and finally hard-thresholds the result.

pub mod data;
pub mod diagnostics;
pub mod edsl;
pub mod io;
pub mod pipeline;
pub mod selection;
pub mod simulation;
pub mod solver;
pub mod transfer;

pub use data::{
    standardize, validate_panel, CorruptionVector, DataError, DatasetKind, LabeledDataset,
    PanelSummary, SparseCoefficients, SparseVector, StandardizationRecord,
};
pub use diagnostics::{mmd_rbf, recovery_score, ser_db, MetricError, RecoveryScore, SerScore};
pub use edsl::{edsl_aggregate, EdslConfig, EdslError, EdslTrace};
pub use pipeline::{
    lasso_cv, prepare_panel, rlasso, run_oracle, run_rtl, run_selection, BaselineFit, FitReport,
    PipelineConfig, PipelineError, RunMode, SelectionReport, ThresholdRule,
};
pub use selection::{
    aht_tune, estimate_corruption_count, estimate_shifts, kfold_split, merged_robust_fit,
    sds_select, AhtDecision, SelectionError, SelectionResult, ShiftEstimate,
};
pub use simulation::{generate, SimDesign, SimInstance};
pub use solver::{
    kkt_residual, lasso_fit, robust_kkt_residual, robust_lasso_fit, LassoFit, LassoProblem,
    RobustLassoFit, RobustLassoProblem, SolverError, SolverSettings,
};
pub use transfer::{
    assemble, compute_tn, estimate_sigma, fit_delta, hard_threshold, NoiseScaleEstimate,
    TransferError, TransferFit,
};
