//! Coordinate-descent engines for the Lasso and the robust (corruption-aware)
//! Lasso.
//!
//! Both problems are solved by one cyclic coordinate-descent engine. The
//! coefficient block is updated column by column against a running residual;
//! the robust problem adds an identity block of per-observation corruption
//! variables scaled by `sqrt(n)`, whose coordinate updates are closed form.
//! Convergence is certified by the maximum violation of the subgradient
//! optimality conditions rather than by iterate movement.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CorruptionVector, SparseCoefficients};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("no convergence after {max_iters} sweeps (KKT residual {kkt_residual:.3e})")]
    NotConverged {
        max_iters: usize,
        kkt_residual: f64,
        beta: Vec<f64>,
        corruption: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Maximum number of coordinate sweeps (full or active-set).
    pub max_iters: usize,
    /// Stopping tolerance on the maximum KKT violation.
    pub tol: f64,
    pub active_set: bool,
    /// Record the objective after every sweep.
    pub track_objective: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-7,
            active_set: true,
            track_objective: false,
        }
    }
}

impl SolverSettings {
    pub fn with_tol(self, tol: f64) -> Self {
        Self { tol, ..self }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(SolverError::InvalidProblem(format!(
                "solver settings need tol > 0 and max_iters > 0 (got {}, {})",
                self.tol, self.max_iters
            )));
        }
        Ok(())
    }
}

/// `(1/2n)||y - X b||^2 + <offset, b> + lambda * sum_j w_j |b_j|`
#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    pub design: ArrayView2<'a, f64>,
    pub response: ArrayView1<'a, f64>,
    pub lambda: f64,
    pub offset: Option<ArrayView1<'a, f64>>,
    pub weights: Option<ArrayView1<'a, f64>>,
    /// Coefficient of an extra `(ridge / 2) ||b||^2` term.
    pub ridge: f64,
}

impl<'a> LassoProblem<'a> {
    pub fn new(design: ArrayView2<'a, f64>, response: ArrayView1<'a, f64>, lambda: f64) -> Self {
        Self {
            design,
            response,
            lambda,
            offset: None,
            weights: None,
            ridge: 0.0,
        }
    }

    pub fn with_offset(mut self, offset: ArrayView1<'a, f64>) -> Self {
        self.offset = Some(offset);
        self
    }

    pub fn with_weights(mut self, weights: ArrayView1<'a, f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        let (n, p) = self.design.dim();
        if n == 0 {
            return Err(SolverError::InvalidProblem("empty design".into()));
        }
        if self.response.len() != n {
            return Err(SolverError::InvalidProblem(format!(
                "response length {} != {n} rows",
                self.response.len()
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SolverError::InvalidProblem(format!(
                "penalty must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(SolverError::InvalidProblem(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        if let Some(o) = &self.offset {
            if o.len() != p {
                return Err(SolverError::InvalidProblem(format!(
                    "offset length {} != {p}",
                    o.len()
                )));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != p || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(SolverError::InvalidProblem(
                    "weights must have length p and be finite, nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    fn penalties(&self) -> Vec<f64> {
        let p = self.design.ncols();
        match &self.weights {
            Some(w) => w.iter().map(|w| w * self.lambda).collect(),
            None => vec![self.lambda; p],
        }
    }

    fn offset_vec(&self) -> Vec<f64> {
        match &self.offset {
            Some(o) => o.to_vec(),
            None => vec![0.0; self.design.ncols()],
        }
    }

    pub fn objective(&self, beta: ArrayView1<f64>) -> f64 {
        let n = self.design.nrows() as f64;
        let r = &self.response - &self.design.dot(&beta);
        let pen = self.penalties();
        let off = self.offset_vec();
        r.dot(&r) / (2.0 * n)
            + beta
                .iter()
                .zip(pen.iter().zip(&off))
                .map(|(b, (l, o))| o * b + l * b.abs() + 0.5 * self.ridge * b * b)
                .sum::<f64>()
    }
}

/// `(1/2n)||y - X(b0 + b) - sqrt(n) e||^2 + lambda_beta ||b||_1 + lambda_e ||e||_1`
#[derive(Debug, Clone)]
pub struct RobustLassoProblem<'a> {
    pub design: ArrayView2<'a, f64>,
    pub response: ArrayView1<'a, f64>,
    pub lambda_beta: f64,
    pub lambda_e: f64,
    /// Fixed coefficients `b0` the fit is centred on.
    pub beta_offset: Option<ArrayView1<'a, f64>>,
}

impl<'a> RobustLassoProblem<'a> {
    pub fn new(
        design: ArrayView2<'a, f64>,
        response: ArrayView1<'a, f64>,
        lambda_beta: f64,
        lambda_e: f64,
    ) -> Self {
        Self {
            design,
            response,
            lambda_beta,
            lambda_e,
            beta_offset: None,
        }
    }

    pub fn with_beta_offset(mut self, offset: ArrayView1<'a, f64>) -> Self {
        self.beta_offset = Some(offset);
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        let (n, p) = self.design.dim();
        if n == 0 {
            return Err(SolverError::InvalidProblem("empty design".into()));
        }
        if self.response.len() != n {
            return Err(SolverError::InvalidProblem(format!(
                "response length {} != {n} rows",
                self.response.len()
            )));
        }
        for (name, v) in [
            ("lambda_beta", self.lambda_beta),
            ("lambda_e", self.lambda_e),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SolverError::InvalidProblem(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(o) = &self.beta_offset {
            if o.len() != p {
                return Err(SolverError::InvalidProblem(format!(
                    "beta offset length {} != {p}",
                    o.len()
                )));
            }
        }
        Ok(())
    }

    /// Response with the fixed coefficient offset removed.
    fn working_response(&self) -> Array1<f64> {
        match &self.beta_offset {
            Some(b0) => &self.response - &self.design.dot(b0),
            None => self.response.to_owned(),
        }
    }

    pub fn objective(&self, beta: ArrayView1<f64>, e: ArrayView1<f64>) -> f64 {
        let n = self.design.nrows() as f64;
        let r = self.working_response() - self.design.dot(&beta) - &e * n.sqrt();
        r.dot(&r) / (2.0 * n)
            + self.lambda_beta * beta.iter().map(|b| b.abs()).sum::<f64>()
            + self.lambda_e * e.iter().map(|b| b.abs()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coefficients: SparseCoefficients,
    pub sweeps: usize,
    pub kkt_residual: f64,
    /// Objective after each sweep; empty unless tracking was requested.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustLassoFit {
    pub coefficients: SparseCoefficients,
    pub corruption: CorruptionVector,
    pub sweeps: usize,
    pub kkt_residual: f64,
    pub objective_trace: Vec<f64>,
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn coordinate_violation(grad: f64, value: f64, penalty: f64) -> f64 {
    if value > 0.0 {
        (grad + penalty).abs()
    } else if value < 0.0 {
        (grad - penalty).abs()
    } else {
        (grad.abs() - penalty).max(0.0)
    }
}

/// Most active-set sweeps between two full sweeps.
const ACTIVE_PASSES: usize = 50;

/// Shared state for one coordinate-descent solve.
struct Engine {
    /// Transposed design, so that every column is a contiguous row.
    xt: Array2<f64>,
    n: usize,
    col_sq: Vec<f64>,
    penalty: Vec<f64>,
    offset: Vec<f64>,
    ridge: f64,
    /// Penalty on the `sqrt(n)`-scaled identity block; `None` for the plain Lasso.
    lambda_e: Option<f64>,
    beta: Vec<f64>,
    e: Vec<f64>,
    resid: Vec<f64>,
}

impl Engine {
    fn new(
        design: ArrayView2<f64>,
        response: Array1<f64>,
        penalty: Vec<f64>,
        offset: Vec<f64>,
        ridge: f64,
        lambda_e: Option<f64>,
        warm: Option<ArrayView1<f64>>,
    ) -> Self {
        let (n, p) = design.dim();
        let xt = design.t().as_standard_layout().into_owned();
        let inv_n = 1.0 / n as f64;
        let col_sq = xt.rows().into_iter().map(|c| c.dot(&c) * inv_n).collect();
        let beta: Vec<f64> = match warm {
            Some(w) => w.to_vec(),
            None => vec![0.0; p],
        };
        let mut resid = response.to_vec();
        for (j, b) in beta.iter().enumerate() {
            if *b != 0.0 {
                let col = xt.row(j);
                for (r, x) in resid.iter_mut().zip(col.iter()) {
                    *r -= x * b;
                }
            }
        }
        Self {
            xt,
            n,
            col_sq,
            penalty,
            offset,
            ridge,
            lambda_e,
            beta,
            e: vec![0.0; if lambda_e.is_some() { n } else { 0 }],
            resid,
        }
    }

    fn check_bounded(&self) -> Result<(), SolverError> {
        for j in 0..self.beta.len() {
            if self.col_sq[j] == 0.0 && self.ridge == 0.0 && self.offset[j].abs() > self.penalty[j]
            {
                return Err(SolverError::InvalidProblem(format!(
                    "objective unbounded below: column {j} is zero but |offset| exceeds its penalty"
                )));
            }
        }
        Ok(())
    }

    /// Exact minimisation over coefficient `j`. Returns the scaled move size.
    #[inline]
    fn update_beta(&mut self, j: usize) -> f64 {
        let cj = self.col_sq[j];
        let curv = cj + self.ridge;
        if curv == 0.0 {
            return 0.0;
        }
        let old = self.beta[j];
        let col = self.xt.row(j);
        let col = col.as_slice().expect("standard layout");
        let z = cj * old + dot(col, &self.resid) / self.n as f64 - self.offset[j];
        let new = soft_threshold(z, self.penalty[j]) / curv;
        if new != old {
            let delta = new - old;
            for (r, x) in self.resid.iter_mut().zip(col) {
                *r -= x * delta;
            }
            self.beta[j] = new;
        }
        (new - old).abs() * curv.sqrt()
    }

    fn sweep_e(&mut self) -> f64 {
        let Some(lambda_e) = self.lambda_e else {
            return 0.0;
        };
        let sqrt_n = (self.n as f64).sqrt();
        let mut moved = 0.0_f64;
        for i in 0..self.n {
            let old = self.e[i];
            let q = self.resid[i] + sqrt_n * old;
            let new = soft_threshold(q / sqrt_n, lambda_e);
            if new != old {
                self.resid[i] = q - sqrt_n * new;
                self.e[i] = new;
                moved = moved.max((new - old).abs());
            }
        }
        moved
    }

    fn full_sweep(&mut self) -> f64 {
        let mut moved = 0.0_f64;
        for j in 0..self.beta.len() {
            moved = moved.max(self.update_beta(j));
        }
        moved.max(self.sweep_e())
    }

    fn active_sweep(&mut self, active: &[usize]) -> f64 {
        let mut moved = 0.0_f64;
        for &j in active {
            moved = moved.max(self.update_beta(j));
        }
        moved.max(self.sweep_e())
    }

    fn kkt(&self) -> f64 {
        let inv_n = 1.0 / self.n as f64;
        let mut worst = 0.0_f64;
        for j in 0..self.beta.len() {
            let col = self.xt.row(j);
            let g = -dot(col.as_slice().unwrap(), &self.resid) * inv_n
                + self.offset[j]
                + self.ridge * self.beta[j];
            worst = worst.max(coordinate_violation(g, self.beta[j], self.penalty[j]));
        }
        if let Some(lambda_e) = self.lambda_e {
            let sqrt_n = (self.n as f64).sqrt();
            for i in 0..self.n {
                let g = -self.resid[i] / sqrt_n;
                worst = worst.max(coordinate_violation(g, self.e[i], lambda_e));
            }
        }
        worst
    }

    fn objective(&self) -> f64 {
        let rss: f64 = self.resid.iter().map(|r| r * r).sum();
        let mut obj = rss / (2.0 * self.n as f64);
        for j in 0..self.beta.len() {
            obj += self.offset[j] * self.beta[j]
                + self.penalty[j] * self.beta[j].abs()
                + 0.5 * self.ridge * self.beta[j] * self.beta[j];
        }
        if let Some(lambda_e) = self.lambda_e {
            obj += lambda_e * self.e.iter().map(|v| v.abs()).sum::<f64>();
        }
        obj
    }

    fn support(&self) -> (Vec<usize>, Vec<usize>) {
        let b = (0..self.beta.len())
            .filter(|&j| self.beta[j] != 0.0)
            .collect();
        let e = (0..self.e.len()).filter(|&i| self.e[i] != 0.0).collect();
        (b, e)
    }

    /// Solves the stationarity equations on a fixed support and sign pattern
    /// in one linear solve. The step is kept only if no sign changes, in which
    /// case it is the exact minimiser over that face.
    fn polish(&mut self, support: &(Vec<usize>, Vec<usize>)) -> bool {
        let (sb, se) = support;
        let m = sb.len() + se.len();
        if m == 0 || (m > self.n && self.ridge == 0.0) {
            return false;
        }
        let n = self.n as f64;
        let sqrt_n = n.sqrt();
        let lambda_e = self.lambda_e.unwrap_or(0.0);
        // y = resid + X beta + sqrt(n) e
        let mut y = self.resid.clone();
        for (j, &b) in self.beta.iter().enumerate() {
            if b != 0.0 {
                for (v, x) in y.iter_mut().zip(self.xt.row(j)) {
                    *v += x * b;
                }
            }
        }
        for &i in se {
            y[i] += sqrt_n * self.e[i];
        }
        let cols: Vec<&[f64]> = sb
            .iter()
            .map(|&j| self.xt.row(j).to_slice().expect("standard layout"))
            .collect();
        let mut gram = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (a, &j) in sb.iter().enumerate() {
            for b in a..sb.len() {
                let g = dot(cols[a], cols[b]) / n;
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
            gram[(a, a)] += self.ridge;
            for (c, &i) in se.iter().enumerate() {
                let g = cols[a][i] / sqrt_n;
                gram[(a, sb.len() + c)] = g;
                gram[(sb.len() + c, a)] = g;
            }
            rhs[a] =
                dot(cols[a], &y) / n - self.offset[j] - self.penalty[j] * self.beta[j].signum();
        }
        for (c, &i) in se.iter().enumerate() {
            gram[(sb.len() + c, sb.len() + c)] = 1.0;
            rhs[sb.len() + c] = y[i] / sqrt_n - lambda_e * self.e[i].signum();
        }
        let Some(chol) = gram.cholesky() else {
            return false;
        };
        let theta = chol.solve(&rhs);
        if !theta.iter().all(|v| v.is_finite()) {
            return false;
        }
        let flips = sb
            .iter()
            .enumerate()
            .any(|(a, &j)| theta[a] * self.beta[j] <= 0.0)
            || se
                .iter()
                .enumerate()
                .any(|(c, &i)| theta[sb.len() + c] * self.e[i] <= 0.0);
        if flips {
            return false;
        }
        for (a, &j) in sb.iter().enumerate() {
            self.beta[j] = theta[a];
        }
        for (c, &i) in se.iter().enumerate() {
            self.e[i] = theta[sb.len() + c];
        }
        self.resid = y;
        for &j in sb {
            let b = self.beta[j];
            for (r, x) in self.resid.iter_mut().zip(self.xt.row(j)) {
                *r -= x * b;
            }
        }
        for &i in se {
            self.resid[i] -= sqrt_n * self.e[i];
        }
        true
    }

    /// Runs sweeps until the KKT residual drops below `settings.tol`.
    /// Returns `(sweeps, kkt, objective trace)`.
    fn run(&mut self, settings: &SolverSettings) -> Result<(usize, f64, Vec<f64>), SolverError> {
        let mut trace = Vec::new();
        let mut sweeps = 0usize;
        let inner_tol = settings.tol * 0.1;
        let mut active: Vec<usize> = Vec::new();
        let mut last_support = (Vec::new(), Vec::new());
        loop {
            self.full_sweep();
            sweeps += 1;
            if settings.track_objective {
                trace.push(self.objective());
            }
            if settings.active_set {
                active.clear();
                active.extend((0..self.beta.len()).filter(|&j| self.beta[j] != 0.0));
                // a full sweep every so often lets stalled coordinates re-enter
                let stop = (sweeps + ACTIVE_PASSES).min(settings.max_iters);
                while sweeps < stop {
                    let moved = self.active_sweep(&active);
                    sweeps += 1;
                    if settings.track_objective {
                        trace.push(self.objective());
                    }
                    if moved <= inner_tol {
                        break;
                    }
                }
            }
            let mut kkt = self.kkt();
            if kkt > settings.tol {
                let support = self.support();
                if support == last_support && self.polish(&support) {
                    kkt = self.kkt();
                    if settings.track_objective {
                        trace.push(self.objective());
                    }
                }
                last_support = support;
            }
            if kkt <= settings.tol {
                return Ok((sweeps, kkt, trace));
            }
            if sweeps >= settings.max_iters {
                return Err(SolverError::NotConverged {
                    max_iters: settings.max_iters,
                    kkt_residual: kkt,
                    beta: self.beta.clone(),
                    corruption: self.lambda_e.map(|_| self.e.clone()),
                });
            }
        }
    }
}

pub fn lasso_fit(
    problem: &LassoProblem,
    settings: &SolverSettings,
) -> Result<LassoFit, SolverError> {
    lasso_fit_warm(problem, settings, None)
}

/// Like [`lasso_fit`], starting from `init` instead of zero.
pub fn lasso_fit_warm(
    problem: &LassoProblem,
    settings: &SolverSettings,
    init: Option<ArrayView1<f64>>,
) -> Result<LassoFit, SolverError> {
    problem.validate()?;
    settings.validate()?;
    if let Some(w) = &init {
        if w.len() != problem.design.ncols() {
            return Err(SolverError::InvalidProblem(
                "warm start has wrong length".into(),
            ));
        }
    }
    let mut engine = Engine::new(
        problem.design,
        problem.response.to_owned(),
        problem.penalties(),
        problem.offset_vec(),
        problem.ridge,
        None,
        init,
    );
    engine.check_bounded()?;
    let (sweeps, kkt, trace) = engine.run(settings)?;
    Ok(LassoFit {
        coefficients: SparseCoefficients::from_dense(Array1::from(engine.beta)),
        sweeps,
        kkt_residual: kkt,
        objective_trace: trace,
    })
}

pub fn robust_lasso_fit(
    problem: &RobustLassoProblem,
    settings: &SolverSettings,
) -> Result<RobustLassoFit, SolverError> {
    robust_lasso_fit_warm(problem, settings, None)
}

pub fn robust_lasso_fit_warm(
    problem: &RobustLassoProblem,
    settings: &SolverSettings,
    init: Option<ArrayView1<f64>>,
) -> Result<RobustLassoFit, SolverError> {
    problem.validate()?;
    settings.validate()?;
    let p = problem.design.ncols();
    let mut engine = Engine::new(
        problem.design,
        problem.working_response(),
        vec![problem.lambda_beta; p],
        vec![0.0; p],
        0.0,
        Some(problem.lambda_e),
        init,
    );
    // Start the corruption block at its exact minimiser for the initial coefficients.
    engine.sweep_e();
    let (sweeps, kkt, trace) = engine.run(settings)?;
    Ok(RobustLassoFit {
        coefficients: SparseCoefficients::from_dense(Array1::from(engine.beta)),
        corruption: CorruptionVector::from_dense(Array1::from(engine.e)),
        sweeps,
        kkt_residual: kkt,
        objective_trace: trace,
    })
}

/// Maximum subgradient-condition violation of `beta` for a Lasso problem.
pub fn kkt_residual(problem: &LassoProblem, beta: ArrayView1<f64>) -> f64 {
    let n = problem.design.nrows() as f64;
    let resid = &problem.response - &problem.design.dot(&beta);
    let grad = problem.design.t().dot(&resid) / -n;
    let pen = problem.penalties();
    let off = problem.offset_vec();
    grad.iter()
        .enumerate()
        .map(|(j, g)| coordinate_violation(g + off[j] + problem.ridge * beta[j], beta[j], pen[j]))
        .fold(0.0, f64::max)
}

/// Maximum subgradient-condition violation of `(beta, e)` for a robust Lasso problem.
pub fn robust_kkt_residual(
    problem: &RobustLassoProblem,
    beta: ArrayView1<f64>,
    e: ArrayView1<f64>,
) -> f64 {
    let n = problem.design.nrows() as f64;
    let resid = problem.working_response() - problem.design.dot(&beta) - &e * n.sqrt();
    let grad = problem.design.t().dot(&resid) / -n;
    let beta_part = grad
        .iter()
        .zip(beta.iter())
        .map(|(g, b)| coordinate_violation(*g, *b, problem.lambda_beta))
        .fold(0.0, f64::max);
    resid
        .iter()
        .zip(e.iter())
        .map(|(r, v)| coordinate_violation(-r / n.sqrt(), *v, problem.lambda_e))
        .fold(beta_part, f64::max)
}

/// `[X, sqrt(n) I]` and the penalty multipliers that turn the robust problem
/// into a weighted Lasso with unit penalty.
pub fn augmented_design(
    design: ArrayView2<f64>,
    lambda_beta: f64,
    lambda_e: f64,
) -> (Array2<f64>, Array1<f64>) {
    let (n, p) = design.dim();
    let mut aug = Array2::zeros((n, p + n));
    aug.slice_mut(ndarray::s![.., ..p]).assign(&design);
    let sqrt_n = (n as f64).sqrt();
    for i in 0..n {
        aug[[i, p + i]] = sqrt_n;
    }
    let weights = Array1::from_iter(
        std::iter::repeat_n(lambda_beta, p).chain(std::iter::repeat_n(lambda_e, n)),
    );
    (aug, weights)
}

/// `||X^T y / n - offset||_inf`: the smallest penalty with an all-zero solution.
pub fn lambda_max(
    design: ArrayView2<f64>,
    response: ArrayView1<f64>,
    offset: Option<ArrayView1<f64>>,
) -> f64 {
    let n = design.nrows() as f64;
    let mut g = design.t().dot(&response) / n;
    if let Some(o) = offset {
        g -= &o;
    }
    g.iter().fold(0.0, |a, v| a.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, p: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng));
        (x, y)
    }

    fn tight() -> SolverSettings {
        SolverSettings::default().with_tol(1e-12)
    }

    #[test]
    fn orthogonal_design_matches_soft_threshold() {
        let s = 2f64.sqrt();
        let x = array![[s, 0.0], [0.0, s]];
        let y = array![s * 1.0, s * 0.1];
        let prob = LassoProblem::new(x.view(), y.view(), 0.2);
        let fit = lasso_fit(&prob, &tight()).unwrap();
        // X^T y / n = (1.0, 0.1); soft threshold at 0.2
        assert!((fit.coefficients.values()[0] - 0.8).abs() < 1e-12);
        assert_eq!(fit.coefficients.values()[1], 0.0);
        assert_eq!(fit.coefficients.support(), &[0]);
        assert!(kkt_residual(&prob, fit.coefficients.values().view()) <= 1e-10);
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let (x, y) = random(5, 3, 11);
        let prob = LassoProblem::new(x.view(), y.view(), 0.0);
        let fit = lasso_fit(&prob, &tight()).unwrap();
        let xm = nalgebra::DMatrix::from_row_slice(5, 3, x.as_slice().unwrap());
        let ym = nalgebra::DVector::from_row_slice(y.as_slice().unwrap());
        let ls = (xm.transpose() * &xm)
            .lu()
            .solve(&(xm.transpose() * ym))
            .unwrap();
        for j in 0..3 {
            assert!((fit.coefficients.values()[j] - ls[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn large_penalty_gives_zero() {
        let (x, y) = random(12, 6, 3);
        let off = Array1::from_iter((0..6).map(|j| 0.1 * j as f64));
        let lmax = lambda_max(x.view(), y.view(), Some(off.view()));
        let prob = LassoProblem::new(x.view(), y.view(), lmax).with_offset(off.view());
        let fit = lasso_fit(&prob, &SolverSettings::default()).unwrap();
        assert_eq!(fit.coefficients.nnz(), 0);
        assert_eq!(kkt_residual(&prob, fit.coefficients.values().view()), 0.0);
    }

    #[test]
    fn perturbed_optimum_has_positive_residual() {
        let s = 2f64.sqrt();
        let x = array![[s, 0.0], [0.0, s]];
        let y = array![s, 0.1 * s];
        let prob = LassoProblem::new(x.view(), y.view(), 0.2);
        assert!(kkt_residual(&prob, array![0.9, 0.0].view()) > 0.0);
        assert!(kkt_residual(&prob, array![0.8, 0.1].view()) > 0.0);
    }

    #[test]
    fn huge_corruption_penalty_reduces_to_lasso_exactly() {
        let (x, y) = random(15, 7, 5);
        let lasso = lasso_fit(
            &LassoProblem::new(x.view(), y.view(), 0.1),
            &SolverSettings::default(),
        )
        .unwrap();
        let robust = robust_lasso_fit(
            &RobustLassoProblem::new(x.view(), y.view(), 0.1, 1e6),
            &SolverSettings::default(),
        )
        .unwrap();
        assert_eq!(robust.corruption.nnz(), 0);
        assert_eq!(robust.coefficients, lasso.coefficients);
    }

    #[test]
    fn noiseless_clean_recovery() {
        let (x, _) = random(40, 10, 9);
        let mut beta = Array1::zeros(10);
        beta[0] = 1.0;
        let y = x.dot(&beta);
        let fit = robust_lasso_fit(
            &RobustLassoProblem::new(x.view(), y.view(), 1e-4, 0.5),
            &tight(),
        )
        .unwrap();
        assert_eq!(fit.corruption.nnz(), 0);
        let err = (fit.coefficients.values() - &beta)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn single_outlier_is_flagged() {
        let (x, _) = random(30, 5, 21);
        let beta = array![1.0, -0.5, 0.0, 0.0, 0.25];
        let mut y = x.dot(&beta);
        y[7] += 10.0;
        let prob = RobustLassoProblem::new(x.view(), y.view(), 0.01, 0.05);
        let fit = robust_lasso_fit(&prob, &tight()).unwrap();
        let argmax = fit
            .corruption
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(argmax, 7);

        // same answer through the augmented-design Lasso
        let (aug, w) = augmented_design(x.view(), 0.01, 0.05);
        let afit = lasso_fit(
            &LassoProblem::new(aug.view(), y.view(), 1.0).with_weights(w.view()),
            &tight(),
        )
        .unwrap();
        for j in 0..5 {
            assert!((afit.coefficients.values()[j] - fit.coefficients.values()[j]).abs() < 1e-8);
        }
        for i in 0..30 {
            assert!((afit.coefficients.values()[5 + i] - fit.corruption.values()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_never_increases() {
        let (x, y) = random(30, 60, 2);
        let settings = SolverSettings {
            track_objective: true,
            ..tight()
        };
        let fit = lasso_fit(&LassoProblem::new(x.view(), y.view(), 0.05), &settings).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
        let fit = robust_lasso_fit(
            &RobustLassoProblem::new(x.view(), y.view(), 0.05, 0.1),
            &settings,
        )
        .unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn homogeneous_in_response_and_penalties() {
        let (x, y) = random(25, 12, 13);
        let base = robust_lasso_fit(
            &RobustLassoProblem::new(x.view(), y.view(), 0.05, 0.1),
            &tight(),
        )
        .unwrap();
        let c = 3.5;
        let yc = &y * c;
        let scaled = robust_lasso_fit(
            &RobustLassoProblem::new(x.view(), yc.view(), 0.05 * c, 0.1 * c),
            &tight(),
        )
        .unwrap();
        for (a, b) in base
            .coefficients
            .values()
            .iter()
            .zip(scaled.coefficients.values())
        {
            assert!((a * c - b).abs() < 1e-8);
        }
        for (a, b) in base
            .corruption
            .values()
            .iter()
            .zip(scaled.corruption.values())
        {
            assert!((a * c - b).abs() < 1e-8);
        }
    }

    #[test]
    fn max_iters_exhaustion_reports_best_iterate() {
        let (x, y) = random(20, 40, 4);
        let settings = SolverSettings {
            max_iters: 1,
            tol: 1e-14,
            ..Default::default()
        };
        match lasso_fit(&LassoProblem::new(x.view(), y.view(), 0.01), &settings) {
            Err(SolverError::NotConverged {
                beta, kkt_residual, ..
            }) => {
                assert_eq!(beta.len(), 40);
                assert!(kkt_residual > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let (x, y) = random(4, 3, 1);
        assert!(lasso_fit(&LassoProblem::new(x.view(), y.view(), -1.0), &tight()).is_err());
        let off = Array1::zeros(2);
        assert!(lasso_fit(
            &LassoProblem::new(x.view(), y.view(), 1.0).with_offset(off.view()),
            &tight()
        )
        .is_err());
        let bad = SolverSettings {
            tol: 0.0,
            ..Default::default()
        };
        assert!(lasso_fit(&LassoProblem::new(x.view(), y.view(), 1.0), &bad).is_err());
    }
}
