//! Source screening by estimated coefficient shift, adaptive choice of the
//! transfer penalties, and k-fold splitting.

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabeledDataset, SparseCoefficients, StandardizationRecord};
use crate::edsl::squared_loss;
use crate::solver::{
    lasso_fit, robust_lasso_fit, LassoProblem, RobustLassoFit, RobustLassoProblem, SolverError,
    SolverSettings,
};
use crate::transfer::{assemble, corruption_threshold, fit_delta_warm, TransferError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no source datasets")]
    NoSources,
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error("cannot split {n} rows into {k} folds")]
    BadFoldCount { n: usize, k: usize },
    #[error("validation source {0} is out of range")]
    BadValidationIndex(usize),
    #[error("every source failed: {0}")]
    AllSourcesFailed(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

/// Penalty constants for the per-source shift statistic. With `N = n0 + n_j`:
/// solo `solo_c * s * sqrt(log p / n_j)`, merged coefficients
/// `merged_beta_c * s * sqrt(log p / N)`, merged corruption
/// `merged_e_c * s * sqrt(2 log N / N)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftPenalties {
    pub solo_c: f64,
    pub merged_beta_c: f64,
    pub merged_e_c: f64,
}

impl Default for ShiftPenalties {
    fn default() -> Self {
        Self {
            solo_c: 1.0,
            merged_beta_c: 1.0,
            merged_e_c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub source_index: usize,
    pub h_hat: f64,
    pub merged_fit: SparseCoefficients,
    pub solo_fit: SparseCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTable {
    pub estimates: Vec<ShiftEstimate>,
    pub failures: Vec<SourceFailure>,
}

impl ShiftTable {
    /// `h_hat` indexed by source, `+inf` for failed sources.
    pub fn by_source(&self, num_sources: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; num_sources];
        for e in &self.estimates {
            out[e.source_index] = e.h_hat;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub validation_index: usize,
    pub shift_table: Vec<ShiftEstimate>,
}

/// Robust fit on `[source; target]` stacked.
pub fn merged_robust_fit(
    target: &LabeledDataset,
    source: &LabeledDataset,
    lambda_beta: f64,
    lambda_e: f64,
    settings: &SolverSettings,
) -> Result<RobustLassoFit, SelectionError> {
    let merged = source
        .stack(target, format!("{}+{}", source.id(), target.id()))
        .map_err(|e| SolverError::InvalidProblem(e.to_string()))?;
    let problem = RobustLassoProblem::new(
        merged.design().view(),
        merged.response().view(),
        lambda_beta,
        lambda_e,
    );
    Ok(robust_lasso_fit(&problem, settings)?)
}

fn log_ratio(a: usize, n: usize) -> f64 {
    ((a as f64).ln() / n as f64).sqrt()
}

fn one_shift(
    target: &LabeledDataset,
    source: &LabeledDataset,
    index: usize,
    sigma: f64,
    penalties: &ShiftPenalties,
    record: &StandardizationRecord,
    settings: &SolverSettings,
) -> Result<ShiftEstimate, SelectionError> {
    let p = source.n_features();
    let nj = source.n_obs();
    let big_n = nj + target.n_obs();
    let solo = lasso_fit(
        &LassoProblem::new(
            source.design().view(),
            source.response().view(),
            penalties.solo_c * sigma * log_ratio(p, nj),
        ),
        settings,
    )?;
    let merged = merged_robust_fit(
        target,
        source,
        penalties.merged_beta_c * sigma * log_ratio(p, big_n),
        penalties.merged_e_c * sigma * (2.0 * (big_n as f64).ln() / big_n as f64).sqrt(),
        settings,
    )?;
    let solo_fit = SparseCoefficients::from_dense(
        record.coefficients_to_original(solo.coefficients.values().view()),
    );
    let merged_fit = SparseCoefficients::from_dense(
        record.coefficients_to_original(merged.coefficients.values().view()),
    );
    let h_hat = 2.0
        * (merged_fit.values() - solo_fit.values())
            .mapv(f64::abs)
            .sum();
    Ok(ShiftEstimate {
        source_index: index,
        h_hat,
        merged_fit,
        solo_fit,
    })
}

/// `h_hat_j = 2 ||merged_j - solo_j||_1` for every source, with coefficients
/// mapped to original units through `record`.
pub fn estimate_shifts(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
    sigma: f64,
    penalties: &ShiftPenalties,
    record: &StandardizationRecord,
    settings: &SolverSettings,
) -> Result<ShiftTable, SelectionError> {
    if sources.is_empty() {
        return Err(SelectionError::NoSources);
    }
    let results: Vec<Result<ShiftEstimate, SelectionError>> = sources
        .par_iter()
        .enumerate()
        .map(|(j, s)| one_shift(target, s, j, sigma, penalties, record, settings))
        .collect();
    let mut table = ShiftTable {
        estimates: Vec::new(),
        failures: Vec::new(),
    };
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => table.estimates.push(e),
            Err(err) => table.failures.push(SourceFailure {
                source_index: j,
                reason: err.to_string(),
            }),
        }
    }
    if table.estimates.is_empty() {
        let reasons: Vec<String> = table
            .failures
            .iter()
            .map(|f| format!("source {}: {}", f.source_index, f.reason))
            .collect();
        return Err(SelectionError::AllSourcesFailed(reasons.join("; ")));
    }
    Ok(table)
}

fn ascending(table: &[ShiftEstimate]) -> Vec<&ShiftEstimate> {
    let mut order: Vec<&ShiftEstimate> = table.iter().collect();
    order.sort_by(|a, b| {
        a.h_hat
            .total_cmp(&b.h_hat)
            .then(a.source_index.cmp(&b.source_index))
    });
    order
}

/// Keeps sources with `h_hat <= h` among the `a_cap` smallest. Ties go to
/// the lower source index.
///
/// # Panics
/// If `table` is empty.
pub fn sds_select(table: &[ShiftEstimate], h: f64, a_cap: usize) -> SelectionResult {
    let order = ascending(table);
    let validation_index = order.first().expect("nonempty shift table").source_index;
    let mut selected: Vec<usize> = order
        .iter()
        .take(a_cap)
        .filter(|e| e.h_hat <= h)
        .map(|e| e.source_index)
        .collect();
    selected.sort_unstable();
    SelectionResult {
        selected,
        validation_index,
        shift_table: table.to_vec(),
    }
}

/// `(s sqrt(2 log p / n), s sqrt(2 log n / n))`
pub fn default_robust_penalties(sigma: f64, n: usize, p: usize) -> (f64, f64) {
    (
        sigma * (2.0 * (p as f64).ln() / n as f64).sqrt(),
        sigma * (2.0 * (n as f64).ln() / n as f64).sqrt(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionScreen {
    pub count: usize,
    pub flagged: Vec<usize>,
    pub threshold: f64,
    pub lambda_beta: f64,
    pub lambda_e: f64,
}

/// Robust fit on the target alone, counting corruption entries at or above
/// `c_tilde * sigma * sqrt(log n / n)`.
pub fn estimate_corruption_count(
    target: &LabeledDataset,
    sigma: f64,
    c_tilde: f64,
    settings: &SolverSettings,
) -> Result<CorruptionScreen, SelectionError> {
    let n = target.n_obs();
    let (lambda_beta, lambda_e) = default_robust_penalties(sigma, n, target.n_features());
    let fit = robust_lasso_fit(
        &RobustLassoProblem::new(
            target.design().view(),
            target.response().view(),
            lambda_beta,
            lambda_e,
        ),
        settings,
    )?;
    let threshold = corruption_threshold(c_tilde, sigma, n);
    let flagged: Vec<usize> = fit
        .corruption
        .support()
        .iter()
        .copied()
        .filter(|&i| fit.corruption.values()[i].abs() >= threshold)
        .collect();
    Ok(CorruptionScreen {
        count: flagged.len(),
        flagged,
        threshold,
        lambda_beta,
        lambda_e,
    })
}

/// Partitions `0..n` into `k` shuffled folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, SelectionError> {
    if k < 2 || n < k {
        return Err(SelectionError::BadFoldCount { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub lambda_delta: Vec<f64>,
    pub lambda_e: Vec<f64>,
}

impl TuningGrid {
    /// `lambda_delta = s sqrt(log p / n) * m`, `lambda_e = s sqrt(2 log n / n) * m`.
    pub fn scaled(sigma: f64, n: usize, p: usize, delta_mult: &[f64], e_mult: &[f64]) -> Self {
        let ld = sigma * log_ratio(p, n);
        let le = sigma * (2.0 * (n as f64).ln() / n as f64).sqrt();
        Self {
            lambda_delta: delta_mult.iter().map(|m| m * ld).collect(),
            lambda_e: e_mult.iter().map(|m| m * le).collect(),
        }
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.lambda_delta
            .iter()
            .flat_map(|&d| self.lambda_e.iter().map(move |&e| (d, e)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AhtBranch {
    ValidationBased,
    CrossValidation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub lambda_delta: f64,
    pub lambda_e: f64,
    pub score: f64,
    /// `||delta||_1` in original units; only filled by the validation branch.
    pub delta_l1: Option<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AhtDecision {
    pub corruption_count_estimate: usize,
    pub branch: AhtBranch,
    pub chosen: (f64, f64),
    pub score_table: Vec<GridScore>,
    pub shift_budget: f64,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AhtOptions {
    /// Corruption count above which the validation branch is used.
    pub c_h: usize,
    /// Budget on `||delta||_1` (original units) in the validation branch.
    pub shift_budget: f64,
    pub folds: usize,
    pub seed: u64,
}

fn held_out_loss(data: &LabeledDataset, rows: &[usize], beta: ArrayView1<f64>) -> (f64, usize) {
    let x = data.design();
    let y = data.response();
    let mut total = 0.0;
    for &i in rows {
        let r = y[i] - x.row(i).dot(&beta);
        total += r * r;
    }
    (total, rows.len())
}

/// Sweep budget of one grid fit. Points this slow sit at near-interpolating
/// penalties and are dropped.
const GRID_MAX_SWEEPS: usize = 10_000;

/// A grid point whose fit does not converge is dropped rather than failing
/// the whole search.
fn grid_fit(
    target: &LabeledDataset,
    beta_source: ArrayView1<f64>,
    lambda_delta: f64,
    lambda_e: f64,
    settings: &SolverSettings,
    warm: Option<&Array1<f64>>,
) -> Result<Option<RobustLassoFit>, SelectionError> {
    match fit_delta_warm(
        target,
        beta_source,
        lambda_delta,
        lambda_e,
        &SolverSettings {
            max_iters: settings.max_iters.min(GRID_MAX_SWEEPS),
            ..settings.clone()
        },
        warm.map(|w| w.view()),
    ) {
        Ok(f) => Ok(Some(f)),
        Err(TransferError::Solver(SolverError::NotConverged { .. })) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Chooses `(lambda_delta, lambda_e)` for the transfer correction.
///
/// With more than `c_h` flagged corruptions every grid pair is fitted on the
/// full target and scored by squared loss on source `v_hat`, discarding pairs
/// whose shift exceeds the budget (if none survive, the smallest shift wins).
/// Otherwise the pairs are scored by k-fold held-out squared loss on the
/// target, ignoring the rows flagged in `screen`.
#[allow(clippy::too_many_arguments)]
pub fn aht_tune(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
    v_hat: usize,
    beta_source: ArrayView1<f64>,
    grid: &TuningGrid,
    screen: &CorruptionScreen,
    options: &AhtOptions,
    record: &StandardizationRecord,
    settings: &SolverSettings,
) -> Result<AhtDecision, SelectionError> {
    let pairs = grid.pairs();
    if pairs.is_empty() {
        return Err(SelectionError::EmptyGrid);
    }
    let branch = if screen.count > options.c_h {
        AhtBranch::ValidationBased
    } else {
        AhtBranch::CrossValidation
    };
    let beta_source_sparse = SparseCoefficients::from_dense(beta_source.to_owned());

    // Fits run along decreasing lambda_delta for each lambda_e, warm-started.
    let mut delta_order: Vec<usize> = (0..grid.lambda_delta.len()).collect();
    delta_order.sort_by(|&a, &b| grid.lambda_delta[b].total_cmp(&grid.lambda_delta[a]));
    let n_e = grid.lambda_e.len();
    let pair_index = |d: usize, e: usize| d * n_e + e;

    let scores: Vec<GridScore> = match branch {
        AhtBranch::ValidationBased => {
            let v = sources
                .get(v_hat)
                .ok_or(SelectionError::BadValidationIndex(v_hat))?;
            let columns: Result<Vec<Vec<(usize, GridScore)>>, SelectionError> = (0..n_e)
                .into_par_iter()
                .map(|ei| {
                    let le = grid.lambda_e[ei];
                    let mut warm: Option<Array1<f64>> = None;
                    let mut out = Vec::with_capacity(delta_order.len());
                    for &di in &delta_order {
                        let ld = grid.lambda_delta[di];
                        let Some(fit) =
                            grid_fit(target, beta_source, ld, le, settings, warm.as_ref())?
                        else {
                            out.push((
                                pair_index(di, ei),
                                GridScore {
                                    lambda_delta: ld,
                                    lambda_e: le,
                                    score: f64::INFINITY,
                                    delta_l1: None,
                                    feasible: false,
                                },
                            ));
                            continue;
                        };
                        let delta_l1 = record
                            .coefficients_to_original(fit.coefficients.values().view())
                            .mapv(f64::abs)
                            .sum();
                        let beta = assemble(&beta_source_sparse, &fit.coefficients)?;
                        out.push((
                            pair_index(di, ei),
                            GridScore {
                                lambda_delta: ld,
                                lambda_e: le,
                                score: squared_loss(v, beta.values().view()),
                                delta_l1: Some(delta_l1),
                                feasible: delta_l1 <= options.shift_budget,
                            },
                        ));
                        warm = Some(fit.coefficients.into_values());
                    }
                    Ok(out)
                })
                .collect();
            let mut flat: Vec<(usize, GridScore)> = columns?.into_iter().flatten().collect();
            flat.sort_by_key(|(i, _)| *i);
            flat.into_iter().map(|(_, g)| g).collect()
        }
        AhtBranch::CrossValidation => {
            let n = target.n_obs();
            let folds = kfold_split(n, options.folds, options.seed)?;
            let mut excluded = vec![false; n];
            for &i in &screen.flagged {
                excluded[i] = true;
            }
            let per_fold: Result<Vec<Vec<Option<(f64, usize)>>>, SelectionError> = folds
                .par_iter()
                .map(|fold| {
                    let mut held = vec![false; n];
                    for &i in fold {
                        held[i] = true;
                    }
                    let train_rows: Vec<usize> = (0..n).filter(|&i| !held[i]).collect();
                    let rows: Vec<usize> = fold.iter().copied().filter(|&i| !excluded[i]).collect();
                    let train = target.select_rows(&train_rows);
                    let mut losses = vec![Some((0.0, 0)); pairs.len()];
                    for ei in 0..n_e {
                        let mut warm: Option<Array1<f64>> = None;
                        for &di in &delta_order {
                            let Some(fit) = grid_fit(
                                &train,
                                beta_source,
                                grid.lambda_delta[di],
                                grid.lambda_e[ei],
                                settings,
                                warm.as_ref(),
                            )?
                            else {
                                losses[pair_index(di, ei)] = None;
                                continue;
                            };
                            let beta: Array1<f64> = &beta_source + fit.coefficients.values();
                            losses[pair_index(di, ei)] =
                                Some(held_out_loss(target, &rows, beta.view()));
                            warm = Some(fit.coefficients.into_values());
                        }
                    }
                    Ok(losses)
                })
                .collect();
            let per_fold = per_fold?;
            pairs
                .iter()
                .enumerate()
                .map(|(k, &(ld, le))| {
                    let sums: Option<(f64, usize)> = per_fold
                        .iter()
                        .try_fold((0.0, 0), |(t, c), f| f[k].map(|(ft, fc)| (t + ft, c + fc)));
                    match sums {
                        Some((total, count)) => GridScore {
                            lambda_delta: ld,
                            lambda_e: le,
                            score: if count == 0 {
                                0.0
                            } else {
                                total / (2 * count) as f64
                            },
                            delta_l1: None,
                            feasible: true,
                        },
                        None => GridScore {
                            lambda_delta: ld,
                            lambda_e: le,
                            score: f64::INFINITY,
                            delta_l1: None,
                            feasible: false,
                        },
                    }
                })
                .collect()
        }
    };

    let best = |s: &GridScore| s.score;
    let chosen_idx = if scores.iter().any(|s| s.feasible) {
        argmin(
            scores
                .iter()
                .map(|s| if s.feasible { best(s) } else { f64::INFINITY }),
        )
    } else {
        argmin(scores.iter().map(|s| s.delta_l1.unwrap_or(f64::INFINITY)))
    };
    let chosen = (scores[chosen_idx].lambda_delta, scores[chosen_idx].lambda_e);
    Ok(AhtDecision {
        corruption_count_estimate: screen.count,
        branch,
        chosen,
        score_table: scores,
        shift_budget: options.shift_budget,
        folds: options.folds,
        seed: options.seed,
    })
}

/// First index of the minimum; NaN sorts last.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    let mut first = true;
    for (i, v) in values.enumerate() {
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if first || v < best.1 {
            best = (i, v);
            first = false;
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn est(j: usize, h: f64) -> ShiftEstimate {
        ShiftEstimate {
            source_index: j,
            h_hat: h,
            merged_fit: SparseCoefficients::zeros(2),
            solo_fit: SparseCoefficients::zeros(2),
        }
    }

    #[test]
    fn sds_examples() {
        let table = vec![est(0, 0.1), est(1, 5.0), est(2, 0.2)];
        let r = sds_select(&table, 1.0, 2);
        assert_eq!(r.selected, vec![0, 2]);
        assert_eq!(r.validation_index, 0);

        let r = sds_select(&table, 0.01, 3);
        assert!(r.selected.is_empty());
        assert_eq!(r.validation_index, 0);

        let tie = vec![est(0, 0.5), est(1, 0.3), est(2, 0.3)];
        assert_eq!(sds_select(&tie, 1.0, 1).selected, vec![1]);
        assert_eq!(sds_select(&tie, 1.0, 1).validation_index, 1);
    }

    #[test]
    fn sds_ignores_row_order() {
        let table = vec![est(0, 0.4), est(1, 0.3), est(2, 0.3), est(3, 2.0)];
        let mut rev = table.clone();
        rev.reverse();
        let a = sds_select(&table, 1.0, 2);
        let b = sds_select(&rev, 1.0, 2);
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.validation_index, b.validation_index);
    }

    #[test]
    fn fold_examples() {
        let f = kfold_split(10, 5, 1).unwrap();
        assert!(f.iter().all(|s| s.len() == 2));
        let f = kfold_split(7, 3, 1).unwrap();
        assert_eq!(f.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(
            kfold_split(50, 5, 9).unwrap(),
            kfold_split(50, 5, 9).unwrap()
        );
        assert_ne!(
            kfold_split(50, 5, 9).unwrap(),
            kfold_split(50, 5, 10).unwrap()
        );
        assert!(matches!(
            kfold_split(3, 4, 0),
            Err(SelectionError::BadFoldCount { .. })
        ));
        assert!(matches!(
            kfold_split(3, 1, 0),
            Err(SelectionError::BadFoldCount { .. })
        ));
    }

    fn problem(
        n: usize,
        p: usize,
        seed: u64,
        k: usize,
        sigma: f64,
    ) -> (LabeledDataset, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut rng));
        let mut b = Array1::zeros(p);
        for j in 0..5 {
            b[j * 3] = if j % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut y = x.dot(&b);
        if sigma > 0.0 {
            let nz = Normal::new(0.0, sigma).unwrap();
            y.mapv_inplace(|v| v + nz.sample(&mut rng));
        }
        for i in rand::seq::index::sample(&mut rng, n, k) {
            y[i] += 8.0;
        }
        (LabeledDataset::target(x, y).unwrap(), b)
    }

    #[test]
    fn corruption_count_examples() {
        let (t, _) = problem(100, 40, 1, 0, 0.0);
        assert_eq!(
            estimate_corruption_count(&t, 1e-3, 3.0, &SolverSettings::default())
                .unwrap()
                .count,
            0
        );

        let mut within = 0;
        for seed in 0..20 {
            let (t, _) = problem(100, 40, 10 + seed, 30, 0.1);
            let c = estimate_corruption_count(&t, 0.1, 3.0, &SolverSettings::default()).unwrap();
            within += (25..=35).contains(&c.count) as usize;
        }
        assert!(within >= 18, "{within}");

        let mut clean_ok = 0;
        for seed in 0..20 {
            let (t, _) = problem(100, 40, 50 + seed, 0, 0.1);
            let c = estimate_corruption_count(&t, 0.1, 3.0, &SolverSettings::default()).unwrap();
            clean_ok += (c.count <= 2) as usize;
        }
        assert!(clean_ok >= 19, "{clean_ok}");
    }

    #[test]
    fn merged_fit_of_duplicated_data_matches_solo() {
        let (t, _) = problem(60, 20, 3, 0, 0.1);
        let s = LabeledDataset::source(0, t.design().clone(), t.response().clone()).unwrap();
        let settings = SolverSettings::default().with_tol(1e-10);
        let merged = merged_robust_fit(&t, &s, 0.05, 1e6, &settings).unwrap();
        let solo = lasso_fit(
            &LassoProblem::new(t.design().view(), t.response().view(), 0.05),
            &settings,
        )
        .unwrap();
        let diff = (merged.coefficients.values() - solo.coefficients.values())
            .mapv(f64::abs)
            .sum();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn shift_ordering() {
        let settings = SolverSettings::default();
        let mut ordered = 0;
        for seed in 0..20 {
            let (t, b) = problem(80, 30, 100 + seed, 0, 0.1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nz = Normal::new(0.0, 0.1).unwrap();
            let mut mk = |shift: f64, j: usize| {
                let x = Array2::from_shape_simple_fn((80, 30), || StandardNormal.sample(&mut rng));
                let mut bj = b.clone();
                bj[20] += shift;
                let y = x.dot(&bj) + Array1::from_shape_simple_fn(80, || nz.sample(&mut rng));
                LabeledDataset::source(j, x, y).unwrap()
            };
            let sources = vec![mk(0.0, 0), mk(10.0, 1)];
            let table = estimate_shifts(
                &t,
                &sources,
                0.1,
                &ShiftPenalties::default(),
                &StandardizationRecord::identity(30),
                &settings,
            )
            .unwrap();
            for e in &table.estimates {
                let direct = 2.0
                    * (e.merged_fit.values() - e.solo_fit.values())
                        .mapv(f64::abs)
                        .sum();
                assert_eq!(e.h_hat, direct);
            }
            ordered += (table.estimates[0].h_hat < table.estimates[1].h_hat) as usize;
        }
        assert!(ordered >= 19, "{ordered}");
    }

    #[test]
    fn aht_branches_and_single_pair() {
        let (t, b) = problem(60, 20, 4, 0, 0.1);
        let s = LabeledDataset::source(0, t.design().clone(), t.response().clone()).unwrap();
        let rec = StandardizationRecord::identity(20);
        let settings = SolverSettings::default();
        let screen = |count| CorruptionScreen {
            count,
            flagged: vec![],
            threshold: 0.0,
            lambda_beta: 0.0,
            lambda_e: 0.0,
        };
        let opts = AhtOptions {
            c_h: 10,
            shift_budget: 1.0,
            folds: 5,
            seed: 0,
        };
        let single = TuningGrid {
            lambda_delta: vec![0.03],
            lambda_e: vec![0.05],
        };
        for count in [0, 60] {
            let d = aht_tune(
                &t,
                std::slice::from_ref(&s),
                0,
                b.view(),
                &single,
                &screen(count),
                &opts,
                &rec,
                &settings,
            )
            .unwrap();
            assert_eq!(d.chosen, (0.03, 0.05));
            let want = if count == 0 {
                AhtBranch::CrossValidation
            } else {
                AhtBranch::ValidationBased
            };
            assert_eq!(d.branch, want);
        }
        let empty = TuningGrid {
            lambda_delta: vec![],
            lambda_e: vec![0.1],
        };
        assert_eq!(
            aht_tune(
                &t,
                &[s],
                0,
                b.view(),
                &empty,
                &screen(0),
                &opts,
                &rec,
                &settings
            )
            .unwrap_err(),
            SelectionError::EmptyGrid
        );
    }

    #[test]
    fn validation_branch_respects_budget() {
        let (t, b) = problem(60, 20, 5, 20, 0.1);
        let s = LabeledDataset::source(0, t.design().clone(), t.design().dot(&b)).unwrap();
        let grid = TuningGrid::scaled(0.1, 60, 20, &[0.05, 0.25, 1.0, 4.0], &[0.5, 1.0, 2.0]);
        let opts = AhtOptions {
            c_h: 0,
            shift_budget: 0.05,
            folds: 5,
            seed: 0,
        };
        let screen = CorruptionScreen {
            count: 20,
            flagged: vec![],
            threshold: 0.0,
            lambda_beta: 0.0,
            lambda_e: 0.0,
        };
        let mut off = b.clone();
        off[0] += 0.3;
        let d = aht_tune(
            &t,
            &[s],
            0,
            off.view(),
            &grid,
            &screen,
            &opts,
            &StandardizationRecord::identity(20),
            &SolverSettings::default(),
        )
        .unwrap();
        let chosen = d
            .score_table
            .iter()
            .find(|g| (g.lambda_delta, g.lambda_e) == d.chosen)
            .unwrap();
        if d.score_table.iter().any(|g| g.feasible) {
            assert!(chosen.delta_l1.unwrap() <= 0.05);
        } else {
            let min = d
                .score_table
                .iter()
                .map(|g| g.delta_l1.unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(chosen.delta_l1.unwrap(), min);
        }
    }
}
