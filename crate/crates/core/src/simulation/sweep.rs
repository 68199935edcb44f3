//! Monte-Carlo sweeps over simulation designs and estimation methods.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate, SimDesign, SimInstance};
use crate::data::SparseCoefficients;
use crate::diagnostics::{recovery_score, ser_db};
use crate::io::fmt_f64;
use crate::pipeline::{lasso_cv, rlasso, run_oracle, run_rtl, PipelineConfig};
use crate::transfer::hard_threshold;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lasso,
    Rlasso,
    Rtl,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lasso, Method::Rlasso, Method::Rtl, Method::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lasso => "lasso",
            Method::Rlasso => "rlasso",
            Method::Rtl => "rtl",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected lasso, rlasso, rtl or oracle)"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("reps must be >= 1")]
    NoReps,
    #[error("could not build a thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub reps: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub pipeline: PipelineConfig,
    /// Sign recovery is judged on the estimate hard-thresholded at this
    /// level; `None` uses half the signal amplitude.
    pub sign_gamma: Option<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            reps: 1000,
            jobs: 0,
            pipeline: PipelineConfig::default(),
            sign_gamma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub design_index: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    /// `None` when the fit failed.
    pub ser_db: Option<f64>,
    pub l2_error: Option<f64>,
    pub sign_match: Option<bool>,
    pub selected: Option<Vec<usize>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub key: CellKey,
    pub design: SimDesign,
    pub reps: usize,
    pub completed: usize,
    pub mean_ser_db: f64,
    pub se_ser_db: f64,
    pub sign_recovery_rate: f64,
    pub mean_l2_error: f64,
    pub outcomes: Vec<RepOutcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub cells: Vec<BenchmarkCell>,
}

pub const CSV_HEADER: &str = "design_index,p,n_target,n_source,num_sources,corruption_fraction,\
shared_support_size,noise_sd,seed,method,reps,completed,failed,mean_ser_db,se_ser_db,\
sign_recovery_rate,mean_l2_error";

impl BenchmarkCell {
    pub fn csv_row(&self) -> String {
        let d = &self.design;
        [
            self.key.design_index.to_string(),
            d.p.to_string(),
            d.n_target.to_string(),
            d.n_source.to_string(),
            d.num_sources.to_string(),
            fmt_f64(d.corruption_fraction),
            d.shared_support_size.to_string(),
            fmt_f64(d.noise_sd),
            d.seed.to_string(),
            self.key.method.to_string(),
            self.reps.to_string(),
            self.completed.to_string(),
            (self.reps - self.completed).to_string(),
            fmt_f64(self.mean_ser_db),
            fmt_f64(self.se_ser_db),
            fmt_f64(self.sign_recovery_rate),
            fmt_f64(self.mean_l2_error),
        ]
        .join(",")
    }
}

impl BenchmarkTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&c.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn cell(&self, design_index: usize, method: Method) -> Option<&BenchmarkCell> {
        self.cells
            .iter()
            .find(|c| c.key.design_index == design_index && c.key.method == method)
    }
}

/// Seed of replicate `rep`: stream `rep` of a generator keyed by `seed`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

/// Fits one method on one instance and returns the estimate in original units.
pub fn fit_method(
    inst: &SimInstance,
    method: Method,
    config: &PipelineConfig,
) -> Result<(SparseCoefficients, Option<Vec<usize>>), String> {
    let settings = &config.solver;
    match method {
        Method::Lasso => lasso_cv(&inst.target, config.folds, config.seed, settings)
            .map(|f| (f.coefficients, None))
            .map_err(|e| e.to_string()),
        Method::Rlasso => rlasso(&inst.target, config.folds, config.seed, settings)
            .map(|f| (f.coefficients, None))
            .map_err(|e| e.to_string()),
        Method::Rtl => run_rtl(&inst.target, &inst.sources, config)
            .map(|r| {
                let sel = r.selection.selected.clone();
                (r.transfer.beta_thresholded, Some(sel))
            })
            .map_err(|e| e.to_string()),
        Method::Oracle => {
            let known = inst.informative_set(config.h);
            if known.is_empty() {
                return Err("no informative source".into());
            }
            run_oracle(
                &inst.target,
                &inst.sources,
                &known,
                Some(&inst.source_shifts),
                config,
            )
            .map(|r| (r.transfer.beta_thresholded, Some(known)))
            .map_err(|e| e.to_string())
        }
    }
}

fn one_rep(design: &SimDesign, method: Method, rep: usize, options: &SweepOptions) -> RepOutcome {
    let seed = rep_seed(design.seed, rep);
    let failed = |error: String| RepOutcome {
        rep,
        seed,
        ser_db: None,
        l2_error: None,
        sign_match: None,
        selected: None,
        error: Some(error),
    };
    let inst = match generate(&SimDesign {
        seed,
        ..design.clone()
    }) {
        Ok(i) => i,
        Err(e) => return failed(e.to_string()),
    };
    let (est, selected) = match fit_method(&inst, method, &options.pipeline) {
        Ok(v) => v,
        Err(e) => return failed(e),
    };
    let truth = inst.truth_beta.values();
    let ser = match ser_db(truth.view(), est.values().view()) {
        Ok(s) => s.db(),
        Err(e) => return failed(e.to_string()),
    };
    let gamma = options.sign_gamma.unwrap_or(0.5 * design.signal_amplitude);
    let ht = hard_threshold(&est, gamma);
    let n = inst.target.n_obs();
    let rec = recovery_score(
        truth.view(),
        ht.values().view(),
        ndarray::Array1::zeros(n).view(),
        ndarray::Array1::zeros(n).view(),
    )
    .expect("matched lengths");
    RepOutcome {
        rep,
        seed,
        ser_db: Some(ser),
        l2_error: Some((truth - est.values()).mapv(|d| d * d).sum().sqrt()),
        sign_match: Some(rec.sign_match),
        selected,
        error: None,
    }
}

fn summarize(key: CellKey, design: &SimDesign, outcomes: Vec<RepOutcome>) -> BenchmarkCell {
    let ok: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    let m = ok.len();
    let (mean, se, sign, l2) = if m == 0 {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let sers: Vec<f64> = ok.iter().map(|o| o.ser_db.expect("ok rep")).collect();
        let mean = sers.iter().sum::<f64>() / m as f64;
        let se = if m > 1 {
            let var = sers.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        } else {
            0.0
        };
        let sign = ok.iter().filter(|o| o.sign_match == Some(true)).count() as f64 / m as f64;
        let l2 = ok.iter().map(|o| o.l2_error.expect("ok rep")).sum::<f64>() / m as f64;
        (mean, se, sign, l2)
    };
    BenchmarkCell {
        key,
        design: design.clone(),
        reps: outcomes.len(),
        completed: m,
        mean_ser_db: mean,
        se_ser_db: se,
        sign_recovery_rate: sign,
        mean_l2_error: l2,
        outcomes,
    }
}

/// Runs every replicate of one (design, method) cell on the current pool.
pub fn sweep_cell(
    design_index: usize,
    design: &SimDesign,
    method: Method,
    options: &SweepOptions,
) -> BenchmarkCell {
    let outcomes: Vec<RepOutcome> = (0..options.reps)
        .into_par_iter()
        .map(|rep| one_rep(design, method, rep, options))
        .collect();
    summarize(
        CellKey {
            design_index,
            method,
        },
        design,
        outcomes,
    )
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, SweepError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SweepError::ThreadPool(e.to_string()))
}

/// Every (design, method) cell in design-major order. Replicate `rep` of a
/// design uses the same generated instance for every method.
pub fn sweep(
    designs: &[SimDesign],
    methods: &[Method],
    options: &SweepOptions,
) -> Result<BenchmarkTable, SweepError> {
    sweep_with(designs, methods, options, |_| {})
}

/// As [`sweep`], calling `on_cell` after each finished cell.
pub fn sweep_with(
    designs: &[SimDesign],
    methods: &[Method],
    options: &SweepOptions,
    mut on_cell: impl FnMut(&BenchmarkCell),
) -> Result<BenchmarkTable, SweepError> {
    if options.reps == 0 {
        return Err(SweepError::NoReps);
    }
    let pool = thread_pool(options.jobs)?;
    let mut table = BenchmarkTable::default();
    for (i, d) in designs.iter().enumerate() {
        for &m in methods {
            let cell = pool.install(|| sweep_cell(i, d, m, options));
            on_cell(&cell);
            table.cells.push(cell);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SimDesign {
        SimDesign {
            p: 60,
            n_target: 40,
            n_source: 40,
            num_sources: 2,
            target_sparsity: 4,
            shared_support_size: 4,
            source_sparsity_alt: 6,
            corruption_fraction: 0.0,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn single_rep_smoke() {
        let opts = SweepOptions {
            reps: 1,
            jobs: 1,
            ..Default::default()
        };
        let t = sweep(&[tiny()], &[Method::Lasso], &opts).unwrap();
        assert_eq!(t.cells.len(), 1);
        assert!(t.cells[0].mean_ser_db.is_finite());
        assert_eq!(t.to_csv().lines().count(), 2);
    }

    #[test]
    fn zero_reps_rejected() {
        let opts = SweepOptions {
            reps: 0,
            ..Default::default()
        };
        assert_eq!(
            sweep(&[tiny()], &[Method::Lasso], &opts),
            Err(SweepError::NoReps)
        );
    }

    #[test]
    fn csv_independent_of_thread_count() {
        let mut opts = SweepOptions {
            reps: 4,
            jobs: 1,
            ..Default::default()
        };
        let designs = [tiny()];
        let methods = [Method::Rlasso, Method::Rtl];
        let a = sweep(&designs, &methods, &opts).unwrap().to_csv();
        opts.jobs = 4;
        let b = sweep(&designs, &methods, &opts).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("ridge".parse::<Method>().is_err());
    }

    #[test]
    fn rep_seeds_differ() {
        assert_ne!(rep_seed(0, 0), rep_seed(0, 1));
        assert_eq!(rep_seed(5, 3), rep_seed(5, 3));
    }
}
