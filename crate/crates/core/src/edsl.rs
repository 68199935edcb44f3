//! Communication-efficient distributed sparse learning over source datasets.
//!
//! Every round, each selected source contributes the gradient of its squared
//! loss at the current iterate; a single anchor dataset then solves a Lasso
//! whose linear term corrects its own gradient towards the average. At a
//! fixed point the iterate solves the Lasso on the averaged loss, without any
//! dataset leaving its machine.

use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabeledDataset, SparseCoefficients};
use crate::solver::{lasso_fit, lasso_fit_warm, LassoProblem, SolverError, SolverSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdslError {
    #[error("no source datasets selected")]
    EmptySelection,
    #[error("selected index {0} is out of range")]
    IndexOutOfRange(usize),
    #[error("anchor {0} is not in the selected set")]
    AnchorNotSelected(usize),
    #[error("source `{id}` has {found} features, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("penalty schedule does not decay: geometric ratio {0} >= 1")]
    DivergentSchedule(f64),
    #[error("invalid EDSL configuration: {0}")]
    InvalidConfig(String),
    #[error("round {round}: {source}")]
    Solver {
        round: usize,
        #[source]
        source: SolverError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    First,
    /// The selected source with the smallest estimated shift.
    MinShift,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientWeighting {
    /// Plain mean of the per-source gradients.
    Unweighted,
    /// Mean weighted by each source's sample size.
    SampleSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdslConfig {
    pub c_lambda_1: f64,
    /// `None` picks the constant so the geometric factor equals `decay_ratio`.
    pub c_lambda_2: Option<f64>,
    /// Sparsity proxy `s`; `None` uses the support size of the anchor's initial fit.
    pub s_hint: Option<usize>,
    pub decay_ratio: f64,
    pub max_rounds: usize,
    pub anchor_policy: AnchorPolicy,
    pub weighting: GradientWeighting,
    /// Multiplies the whole penalty schedule (typically the noise level).
    pub noise_scale: f64,
    /// Each round's penalty is at least `offset_guard * ||correction||_inf`,
    /// which keeps the anchor problem bounded below when `p > n`.
    pub offset_guard: f64,
    /// Weight of a proximal term `(w / 2) ||b - b_t||^2` added to each
    /// round's anchor problem. It keeps the problem strongly convex and
    /// vanishes at a fixed point.
    pub proximal: f64,
}

impl Default for EdslConfig {
    fn default() -> Self {
        Self {
            c_lambda_1: 2f64.sqrt(),
            c_lambda_2: None,
            s_hint: None,
            decay_ratio: 0.5,
            max_rounds: 8,
            anchor_policy: AnchorPolicy::MinShift,
            weighting: GradientWeighting::Unweighted,
            noise_scale: 1.0,
            offset_guard: 0.0,
            proximal: 0.5,
        }
    }
}

/// The penalty sequence
/// `lambda_t = scale * (c1 sqrt(log p / N) + sqrt(log p / n_v) (c2 s sqrt(log p / n_v))^t)`
/// where `N` is the pooled sample size and `n_v` the anchor's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub noise_scale: f64,
    pub c_lambda_1: f64,
    pub c_lambda_2: f64,
    pub s_hint: usize,
    pub p: usize,
    pub n_pooled: usize,
    pub n_anchor: usize,
}

impl PenaltySchedule {
    pub fn floor(&self) -> f64 {
        let lp = (self.p as f64).ln();
        self.noise_scale * self.c_lambda_1 * (lp / self.n_pooled as f64).sqrt()
    }

    pub fn ratio(&self) -> f64 {
        let lp = (self.p as f64).ln();
        self.c_lambda_2 * self.s_hint as f64 * (lp / self.n_anchor as f64).sqrt()
    }

    pub fn lambda(&self, t: usize) -> f64 {
        let lp = (self.p as f64).ln();
        let lead = (lp / self.n_anchor as f64).sqrt();
        let floor = self.c_lambda_1 * (lp / self.n_pooled as f64).sqrt();
        self.noise_scale * (floor + lead * self.ratio().powi(t as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdslRound {
    pub round: usize,
    pub lambda: f64,
    /// `||beta_{t+1} - beta_t||_1`
    pub l1_change: f64,
    /// Sup-norm of the gradient correction used as the linear term.
    pub correction_norm: f64,
    /// Proximal weight the round ended with, after any backtracking.
    pub proximal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdslTrace {
    pub anchor: usize,
    pub selected: Vec<usize>,
    pub schedule: PenaltySchedule,
    pub initial_lambda: f64,
    pub rounds: Vec<EdslRound>,
}

impl EdslTrace {
    pub fn final_lambda(&self) -> f64 {
        self.rounds.last().map_or(self.initial_lambda, |r| r.lambda)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,lambda,l1_change,correction_norm,proximal\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round,
                crate::io::fmt_f64(r.lambda),
                crate::io::fmt_f64(r.l1_change),
                crate::io::fmt_f64(r.correction_norm),
                crate::io::fmt_f64(r.proximal)
            );
        }
        out
    }
}

/// `-(1/n) X^T (y - X beta)`
pub fn gradient(dataset: &LabeledDataset, beta: ArrayView1<f64>) -> Array1<f64> {
    let x = dataset.design();
    let resid = dataset.response() - &x.dot(&beta);
    x.t().dot(&resid) / -(dataset.n_obs() as f64)
}

/// `(1/2n) ||y - X beta||^2`
pub fn squared_loss(dataset: &LabeledDataset, beta: ArrayView1<f64>) -> f64 {
    let resid = dataset.response() - &dataset.design().dot(&beta);
    resid.dot(&resid) / (2.0 * dataset.n_obs() as f64)
}

pub fn resolve_anchor(
    policy: AnchorPolicy,
    selected: &[usize],
    shifts: Option<&[f64]>,
) -> Result<usize, EdslError> {
    let first = *selected.first().ok_or(EdslError::EmptySelection)?;
    match policy {
        AnchorPolicy::First => Ok(first),
        AnchorPolicy::Explicit(v) if selected.contains(&v) => Ok(v),
        AnchorPolicy::Explicit(v) => Err(EdslError::AnchorNotSelected(v)),
        AnchorPolicy::MinShift => Ok(match shifts {
            Some(h) => selected
                .iter()
                .copied()
                .filter(|&j| j < h.len())
                .min_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)))
                .unwrap_or(first),
            None => first,
        }),
    }
}

/// Doublings of the proximal weight tried within one round.
const MAX_BACKTRACK: usize = 30;

/// Aggregates the selected sources into one sparse estimate.
///
/// `shifts`, indexed by source, is consulted only by [`AnchorPolicy::MinShift`].
pub fn edsl_aggregate(
    sources: &[LabeledDataset],
    selected: &[usize],
    config: &EdslConfig,
    settings: &SolverSettings,
    shifts: Option<&[f64]>,
) -> Result<(SparseCoefficients, EdslTrace), EdslError> {
    if selected.is_empty() {
        return Err(EdslError::EmptySelection);
    }
    if let Some(&bad) = selected.iter().find(|&&j| j >= sources.len()) {
        return Err(EdslError::IndexOutOfRange(bad));
    }
    if !(config.c_lambda_1 > 0.0)
        || !(config.noise_scale > 0.0)
        || config.max_rounds == 0
        || !(config.offset_guard >= 0.0)
        || !(config.proximal >= 0.0)
    {
        return Err(EdslError::InvalidConfig(
            "c_lambda_1 and noise_scale must be positive, offset_guard >= 0, max_rounds >= 1"
                .into(),
        ));
    }
    let anchor = resolve_anchor(config.anchor_policy, selected, shifts)?;
    let v = &sources[anchor];
    let p = v.n_features();
    for &j in selected {
        if sources[j].n_features() != p {
            return Err(EdslError::DimensionMismatch {
                id: sources[j].id().to_string(),
                expected: p,
                found: sources[j].n_features(),
            });
        }
    }

    let n_pooled: usize = selected.iter().map(|&j| sources[j].n_obs()).sum();
    let mut schedule = PenaltySchedule {
        noise_scale: config.noise_scale,
        c_lambda_1: config.c_lambda_1,
        c_lambda_2: config.c_lambda_2.unwrap_or(0.0),
        s_hint: config.s_hint.unwrap_or(1).max(1),
        p,
        n_pooled,
        n_anchor: v.n_obs(),
    };
    // Initialisation: plain Lasso on the anchor at lambda_0.
    let initial_lambda = schedule.lambda(0);
    let init = lasso_fit(
        &LassoProblem::new(v.design().view(), v.response().view(), initial_lambda),
        settings,
    )
    .map_err(|source| EdslError::Solver { round: 0, source })?;
    if config.s_hint.is_none() {
        schedule.s_hint = init.coefficients.nnz().max(1);
    }
    if config.c_lambda_2.is_none() {
        let lead = ((p as f64).ln() / v.n_obs() as f64).sqrt();
        schedule.c_lambda_2 = config.decay_ratio / (schedule.s_hint as f64 * lead);
    }
    let ratio = schedule.ratio();
    if !(ratio < 1.0) || !(ratio > 0.0) {
        return Err(EdslError::DivergentSchedule(ratio));
    }

    let weights: Vec<f64> = match config.weighting {
        GradientWeighting::Unweighted => vec![1.0 / selected.len() as f64; selected.len()],
        GradientWeighting::SampleSize => selected
            .iter()
            .map(|&j| sources[j].n_obs() as f64 / n_pooled as f64)
            .collect(),
    };

    let mut beta = init.coefficients.values().clone();
    let mut rounds = Vec::new();
    let floor = schedule.floor();
    for t in 0..config.max_rounds {
        let grads: Vec<Array1<f64>> = selected
            .par_iter()
            .map(|&j| gradient(&sources[j], beta.view()))
            .collect();
        // fixed summation order keeps the result independent of scheduling
        let mut correction = Array1::<f64>::zeros(p);
        for (g, w) in grads.iter().zip(&weights) {
            correction.scaled_add(*w, g);
        }
        if selected.len() > 1 {
            correction -= &gradient(v, beta.view());
        } else {
            correction.fill(0.0);
        }
        let correction_norm = correction.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
        let scheduled = schedule.lambda(t + 1);
        let lambda = scheduled.max(config.offset_guard * correction_norm);
        // (w/2)||b - b_t||^2 = (w/2)||b||^2 - w <b_t, b> + const
        // only a nonzero correction can make the surrogate unbounded
        let mut prox = if correction_norm > 1e-10 {
            config.proximal
        } else {
            0.0
        };
        let pooled = |b: &Array1<f64>| -> f64 {
            let loss: f64 = selected
                .iter()
                .zip(&weights)
                .map(|(&j, w)| w * squared_loss(&sources[j], b.view()))
                .sum();
            loss + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
        };
        let start = if selected.len() > 1 {
            pooled(&beta)
        } else {
            0.0
        };
        let mut attempts = 0;
        let next = loop {
            let linear = &correction - &(&beta * prox);
            let fit = lasso_fit_warm(
                &LassoProblem::new(v.design().view(), v.response().view(), lambda)
                    .with_offset(linear.view())
                    .with_ridge(prox),
                settings,
                Some(beta.view()),
            )
            .map_err(|source| EdslError::Solver {
                round: t + 1,
                source,
            })?;
            let next = fit.coefficients.into_values();
            // back off while the round raises the pooled objective
            if selected.len() == 1
                || attempts == MAX_BACKTRACK
                || pooled(&next) <= start + 1e-12 * start.abs().max(1.0)
            {
                break next;
            }
            attempts += 1;
            prox = if prox > 0.0 { 2.0 * prox } else { 1.0 };
        };
        let l1_change = (&next - &beta).iter().map(|d| d.abs()).sum::<f64>();
        rounds.push(EdslRound {
            round: t + 1,
            lambda,
            l1_change,
            correction_norm,
            proximal: prox,
        });
        beta = next;
        if (scheduled - floor) <= 1e-3 * floor && l1_change <= settings.tol {
            break;
        }
    }

    Ok((
        SparseCoefficients::from_dense(beta),
        EdslTrace {
            anchor,
            selected: selected.to_vec(),
            schedule,
            initial_lambda,
            rounds,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn dataset(n: usize, p: usize, beta: &Array1<f64>, sigma: f64, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut rng));
        let noise = Normal::new(0.0, sigma).unwrap();
        let y = x.dot(beta) + Array1::from_shape_simple_fn(n, || noise.sample(&mut rng));
        LabeledDataset::source(seed as usize, x, y).unwrap()
    }

    fn sparse_beta(p: usize) -> Array1<f64> {
        let mut b = Array1::zeros(p);
        b[0] = 1.0;
        b[3] = -0.8;
        b[7] = 0.5;
        b
    }

    #[test]
    fn gradient_at_zero_and_interpolant() {
        let d = dataset(
            4,
            4,
            &sparse_beta(8).slice(ndarray::s![..4]).to_owned(),
            0.0,
            1,
        );
        let g0 = gradient(&d, Array1::zeros(4).view());
        let expect = d.design().t().dot(d.response()) / -4.0;
        assert_eq!(g0, expect);
        // noiseless square system: the truth interpolates
        let g = gradient(&d, sparse_beta(8).slice(ndarray::s![..4]));
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = Array1::from(vec![0.3, -0.2, 0.0, 1.1]);
        let d = dataset(6, 4, &b, 0.5, 17);
        let at = Array1::from(vec![0.1, 0.4, -0.3, 0.2]);
        let g = gradient(&d, at.view());
        let h = 1e-5;
        for j in 0..4 {
            let mut up = at.clone();
            up[j] += h;
            let mut dn = at.clone();
            dn[j] -= h;
            let fd = (squared_loss(&d, up.view()) - squared_loss(&d, dn.view())) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn schedule_decays_to_floor() {
        let s = PenaltySchedule {
            noise_scale: 0.1,
            c_lambda_1: 1.0,
            c_lambda_2: 0.1,
            s_hint: 12,
            p: 400,
            n_pooled: 500,
            n_anchor: 100,
        };
        let lp = 400f64.ln();
        let expected = |t: i32| {
            0.1 * ((lp / 500.0).sqrt()
                + (lp / 100.0).sqrt() * (0.1 * 12.0 * (lp / 100.0).sqrt()).powi(t))
        };
        for t in 0..10 {
            assert_eq!(s.lambda(t as usize), expected(t));
            assert!(s.lambda(t as usize + 1) < s.lambda(t as usize));
            assert!(s.lambda(t as usize) > s.floor());
        }
    }

    #[test]
    fn single_source_cancels_correction() {
        let d = dataset(60, 30, &sparse_beta(30), 0.3, 5);
        let settings = SolverSettings::default().with_tol(1e-12);
        let (beta, trace) = edsl_aggregate(
            std::slice::from_ref(&d),
            &[0],
            &EdslConfig::default(),
            &settings,
            None,
        )
        .unwrap();
        assert!(trace.rounds.iter().all(|r| r.correction_norm == 0.0));
        let solo = lasso_fit(
            &LassoProblem::new(d.design().view(), d.response().view(), trace.final_lambda()),
            &settings,
        )
        .unwrap();
        for (a, b) in beta.values().iter().zip(solo.coefficients.values()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicated_source_matches_single() {
        let d = dataset(60, 30, &sparse_beta(30), 0.3, 8);
        let settings = SolverSettings::default().with_tol(1e-12);
        let cfg = EdslConfig {
            s_hint: Some(3),
            ..Default::default()
        };
        let one = edsl_aggregate(std::slice::from_ref(&d), &[0], &cfg, &settings, None).unwrap();
        let two = edsl_aggregate(&[d.clone(), d.clone()], &[0, 1], &cfg, &settings, None).unwrap();
        // pooled sample size differs, so compare against the matching single-source penalty
        let solo = lasso_fit(
            &LassoProblem::new(d.design().view(), d.response().view(), two.1.final_lambda()),
            &settings,
        )
        .unwrap();
        for (a, b) in two.0.values().iter().zip(solo.coefficients.values()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(one.1.rounds.iter().all(|r| r.correction_norm == 0.0));
        assert!(two.1.rounds.iter().all(|r| r.correction_norm < 1e-12));
    }

    #[test]
    fn surrogate_objective_descends() {
        let beta = sparse_beta(40);
        let sources: Vec<_> = (0..4)
            .map(|j| dataset(50, 40, &beta, 0.5, 100 + j))
            .collect();
        let settings = SolverSettings::default().with_tol(1e-10);
        let cfg = EdslConfig {
            noise_scale: 0.5,
            anchor_policy: AnchorPolicy::First,
            ..Default::default()
        };
        let (_, trace) = edsl_aggregate(&sources, &[0, 1, 2, 3], &cfg, &settings, None).unwrap();
        assert!(!trace.rounds.is_empty());
        // replay rounds and check the anchor surrogate never increases
        let v = &sources[trace.anchor];
        let mut prev = lasso_fit(
            &LassoProblem::new(v.design().view(), v.response().view(), trace.initial_lambda),
            &settings,
        )
        .unwrap()
        .coefficients
        .into_values();
        for r in &trace.rounds {
            let mut corr = Array1::<f64>::zeros(40);
            for s in &sources {
                corr.scaled_add(0.25, &gradient(s, prev.view()));
            }
            corr -= &gradient(v, prev.view());
            let prob = LassoProblem::new(v.design().view(), v.response().view(), r.lambda)
                .with_offset(corr.view());
            let next = lasso_fit_warm(&prob, &settings, Some(prev.view()))
                .unwrap()
                .coefficients
                .into_values();
            assert!(prob.objective(next.view()) <= prob.objective(prev.view()) + 1e-10);
            prev = next;
        }
    }

    #[test]
    fn errors() {
        let d = dataset(20, 10, &sparse_beta(10), 0.3, 1);
        let s = SolverSettings::default();
        assert_eq!(
            edsl_aggregate(
                std::slice::from_ref(&d),
                &[],
                &EdslConfig::default(),
                &s,
                None
            )
            .unwrap_err(),
            EdslError::EmptySelection
        );
        assert_eq!(
            edsl_aggregate(
                std::slice::from_ref(&d),
                &[2],
                &EdslConfig::default(),
                &s,
                None
            )
            .unwrap_err(),
            EdslError::IndexOutOfRange(2)
        );
        let cfg = EdslConfig {
            c_lambda_2: Some(10.0),
            s_hint: Some(5),
            ..Default::default()
        };
        assert!(matches!(
            edsl_aggregate(std::slice::from_ref(&d), &[0], &cfg, &s, None),
            Err(EdslError::DivergentSchedule(_))
        ));
    }

    #[test]
    fn min_shift_anchor() {
        assert_eq!(
            resolve_anchor(
                AnchorPolicy::MinShift,
                &[0, 2, 3],
                Some(&[0.0, 0.1, 0.5, 0.5])
            )
            .unwrap(),
            0
        );
        assert_eq!(
            resolve_anchor(AnchorPolicy::MinShift, &[2, 3], Some(&[0.0, 0.1, 0.5, 0.5])).unwrap(),
            2
        );
        assert_eq!(
            resolve_anchor(AnchorPolicy::Explicit(3), &[2, 3], None).unwrap(),
            3
        );
    }
}
