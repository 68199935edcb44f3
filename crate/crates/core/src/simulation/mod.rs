//! Seeded synthetic panels: a sparse target signal observed through a random
//! sensing matrix with corrupted labels, plus clean source datasets whose
//! coefficients partially share the target's support.

pub mod sweep;

pub use sweep::{
    fit_method, rep_seed, sweep, sweep_cell, sweep_with, thread_pool, BenchmarkCell,
    BenchmarkTable, CellKey, Method, RepOutcome, SweepError, SweepOptions, CSV_HEADER,
};

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CorruptionVector, LabeledDataset, SparseCoefficients};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid simulation design: {0}")]
pub struct InvalidDesign(pub String);

/// Variance of the Gaussian sensing-matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignScaling {
    /// Entry variance `1/sqrt(n)`.
    InverseSqrtN,
    /// Entry variance `1/n` (unit-norm columns on average).
    InverseN,
}

impl DesignScaling {
    pub fn entry_variance(&self, n: usize) -> f64 {
        match self {
            Self::InverseSqrtN => 1.0 / (n as f64).sqrt(),
            Self::InverseN => 1.0 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimDesign {
    pub p: usize,
    pub n_target: usize,
    pub n_source: usize,
    pub num_sources: usize,
    pub target_sparsity: usize,
    /// Magnitude of every nonzero target coefficient; signs are random.
    pub signal_amplitude: f64,
    /// Fraction `r` of corrupted target labels.
    pub corruption_fraction: f64,
    pub corruption_low: f64,
    pub corruption_high: f64,
    /// Multiply each corruption by a random sign.
    pub corruption_sign_flip: bool,
    pub noise_sd: f64,
    pub source_sparsity_alt: usize,
    /// Chance a source uses `source_sparsity_alt`; `None` means `1/L`.
    pub alt_sparsity_probability: Option<f64>,
    /// Number of target-support coordinates a source copies exactly.
    pub shared_support_size: usize,
    pub shift_low: f64,
    pub shift_high: f64,
    pub design_scaling: DesignScaling,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            p: 400,
            n_target: 100,
            n_source: 100,
            num_sources: 5,
            target_sparsity: 12,
            signal_amplitude: 1.0,
            corruption_fraction: 0.1,
            corruption_low: 0.5,
            corruption_high: 1.0,
            corruption_sign_flip: false,
            noise_sd: 0.1,
            source_sparsity_alt: 20,
            alt_sparsity_probability: None,
            shared_support_size: 12,
            shift_low: 2.0,
            shift_high: 24.0,
            design_scaling: DesignScaling::InverseSqrtN,
            seed: 0,
        }
    }
}

impl SimDesign {
    pub fn corruption_count(&self) -> usize {
        (self.corruption_fraction * self.n_target as f64).round() as usize
    }

    pub fn alt_probability(&self) -> f64 {
        self.alt_sparsity_probability
            .unwrap_or(if self.num_sources == 0 {
                0.0
            } else {
                1.0 / self.num_sources as f64
            })
    }

    pub fn validate(&self) -> Result<(), InvalidDesign> {
        let fail = |m: String| Err(InvalidDesign(m));
        if self.p == 0 || self.n_target < 2 || (self.num_sources > 0 && self.n_source < 2) {
            return fail("p must be positive and every dataset needs at least 2 rows".into());
        }
        if self.target_sparsity == 0 || self.target_sparsity > self.p {
            return fail(format!(
                "target_sparsity must be in 1..={} (got {})",
                self.p, self.target_sparsity
            ));
        }
        if self.shared_support_size > self.target_sparsity {
            return fail(format!(
                "shared_support_size {} exceeds target_sparsity {}",
                self.shared_support_size, self.target_sparsity
            ));
        }
        if self.source_sparsity_alt < self.target_sparsity || self.source_sparsity_alt > self.p {
            return fail(format!(
                "source_sparsity_alt must be in {}..={} (got {})",
                self.target_sparsity, self.p, self.source_sparsity_alt
            ));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return fail(format!(
                "corruption_fraction must be in [0, 1] (got {})",
                self.corruption_fraction
            ));
        }
        if !(self.corruption_low >= 0.0 && self.corruption_low <= self.corruption_high)
            || !self.corruption_high.is_finite()
        {
            return fail("corruption range needs 0 <= corruption_low <= corruption_high".into());
        }
        if !(self.shift_low >= 0.0 && self.shift_low <= self.shift_high)
            || !self.shift_high.is_finite()
        {
            return fail("shift range needs 0 <= shift_low <= shift_high".into());
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return fail("noise_sd must be >= 0".into());
        }
        if !(self.signal_amplitude > 0.0) || !self.signal_amplitude.is_finite() {
            return fail("signal_amplitude must be > 0".into());
        }
        if let Some(q) = self.alt_sparsity_probability {
            if !(0.0..=1.0).contains(&q) {
                return fail(format!(
                    "alt_sparsity_probability must be in [0, 1] (got {q})"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimInstance {
    pub target: LabeledDataset,
    pub truth_beta: SparseCoefficients,
    /// Corruption added to the target labels, in response units.
    pub truth_e: CorruptionVector,
    pub sources: Vec<LabeledDataset>,
    pub truth_source_betas: Vec<SparseCoefficients>,
    /// `||beta* - beta_j||_1` for every source.
    pub source_shifts: Vec<f64>,
    pub design_echo: SimDesign,
}

impl SimInstance {
    /// Sources whose realised shift is at most `h`.
    pub fn informative_set(&self, h: f64) -> Vec<usize> {
        self.source_shifts
            .iter()
            .enumerate()
            .filter(|(_, s)| **s <= h)
            .map(|(j, _)| j)
            .collect()
    }
}

fn sensing_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize, scaling: DesignScaling) -> Array2<f64> {
    let normal = Normal::new(0.0, scaling.entry_variance(n).sqrt()).expect("positive variance");
    Array2::from_shape_simple_fn((n, p), || normal.sample(rng))
}

fn noise(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Array1<f64> {
    if sd == 0.0 {
        return Array1::zeros(n);
    }
    let normal = Normal::new(0.0, sd).expect("finite sd");
    Array1::from_shape_simple_fn(n, || normal.sample(rng))
}

fn random_sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

pub fn generate(design: &SimDesign) -> Result<SimInstance, InvalidDesign> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let p = design.p;

    let mut support: Vec<usize> = sample(&mut rng, p, design.target_sparsity).into_vec();
    support.sort_unstable();
    let mut beta = Array1::<f64>::zeros(p);
    for &j in &support {
        beta[j] = design.signal_amplitude * random_sign(&mut rng);
    }

    let n = design.n_target;
    let x = sensing_matrix(&mut rng, n, p, design.design_scaling);
    let k = design.corruption_count();
    let mut e = Array1::<f64>::zeros(n);
    for i in sample(&mut rng, n, k) {
        let mut v = rng.random_range(design.corruption_low..=design.corruption_high);
        if design.corruption_sign_flip {
            v *= random_sign(&mut rng);
        }
        e[i] = v;
    }
    let y = x.dot(&beta) + &e + noise(&mut rng, n, design.noise_sd);
    let target = LabeledDataset::target(x, y).map_err(|err| InvalidDesign(err.to_string()))?;

    let off_support: Vec<usize> = (0..p).filter(|j| beta[*j] == 0.0).collect();
    let q = design.alt_probability();
    let mut sources = Vec::with_capacity(design.num_sources);
    let mut source_betas = Vec::with_capacity(design.num_sources);
    let mut shifts = Vec::with_capacity(design.num_sources);
    for j in 0..design.num_sources {
        let sparsity = if rng.random_bool(q) {
            design.source_sparsity_alt
        } else {
            design.target_sparsity
        };
        let shared: Vec<usize> = sample(&mut rng, support.len(), design.shared_support_size)
            .into_iter()
            .map(|i| support[i])
            .collect();
        let mut bj = beta.clone();
        // coordinates where the source departs from the target
        let mut moved: Vec<(usize, f64)> = support
            .iter()
            .filter(|c| !shared.contains(c))
            .map(|&c| (c, beta[c].signum()))
            .collect();
        let extra = sparsity - design.target_sparsity;
        for i in sample(&mut rng, off_support.len(), extra) {
            moved.push((off_support[i], random_sign(&mut rng)));
        }
        let mut realised = 0.0;
        if !moved.is_empty() {
            let h = rng.random_range(design.shift_low..=design.shift_high);
            let w: Vec<f64> = moved.iter().map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = w.iter().sum();
            for ((c, dir), wi) in moved.iter().zip(&w) {
                let m = h * wi / total;
                bj[*c] += dir * m;
            }
            realised = (&beta - &bj).iter().map(|d| d.abs()).sum();
        }
        let xs = sensing_matrix(&mut rng, design.n_source, p, design.design_scaling);
        let ys = xs.dot(&bj) + noise(&mut rng, design.n_source, design.noise_sd);
        sources
            .push(LabeledDataset::source(j, xs, ys).map_err(|err| InvalidDesign(err.to_string()))?);
        source_betas.push(SparseCoefficients::from_dense(bj));
        shifts.push(realised);
    }

    Ok(SimInstance {
        target,
        truth_beta: SparseCoefficients::from_dense(beta),
        truth_e: CorruptionVector::from_dense(e),
        sources,
        truth_source_betas: source_betas,
        source_shifts: shifts,
        design_echo: design.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_design_shapes() {
        let inst = generate(&SimDesign::default()).unwrap();
        assert_eq!(inst.target.design().dim(), (100, 400));
        assert_eq!(inst.truth_beta.nnz(), 12);
        assert_eq!(inst.truth_e.nnz(), 10);
        assert_eq!(inst.sources.len(), 5);
        for s in &inst.sources {
            assert_eq!(s.design().dim(), (100, 400));
        }
    }

    #[test]
    fn corruption_values_in_range() {
        for r in [0.0, 0.1, 0.35, 0.9] {
            let d = SimDesign {
                corruption_fraction: r,
                seed: 3,
                ..Default::default()
            };
            let inst = generate(&d).unwrap();
            assert_eq!(inst.truth_e.nnz(), (r * 100.0_f64).round() as usize);
            for &i in inst.truth_e.support() {
                let v = inst.truth_e.values()[i];
                assert!((0.5..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn clean_target_when_r_zero() {
        let d = SimDesign {
            corruption_fraction: 0.0,
            noise_sd: 0.0,
            ..Default::default()
        };
        let inst = generate(&d).unwrap();
        assert_eq!(inst.truth_e.nnz(), 0);
        let fitted = inst.target.design().dot(inst.truth_beta.values());
        assert_eq!(&fitted, inst.target.response());
    }

    #[test]
    fn deterministic_per_seed() {
        let d = SimDesign {
            seed: 42,
            ..Default::default()
        };
        let a = generate(&d).unwrap();
        let b = generate(&d).unwrap();
        assert_eq!(a.target, b.target);
        assert_eq!(a.sources, b.sources);
        assert_eq!(a.truth_source_betas, b.truth_source_betas);
        let c = generate(&SimDesign { seed: 43, ..d }).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn source_structure() {
        for seed in 0..20 {
            let d = SimDesign {
                shared_support_size: 8,
                seed,
                ..Default::default()
            };
            let inst = generate(&d).unwrap();
            for (bj, h) in inst.truth_source_betas.iter().zip(&inst.source_shifts) {
                assert!(bj.nnz() == 12 || bj.nnz() == 20);
                let common = (0..400)
                    .filter(|&c| {
                        bj.values()[c] != 0.0 && bj.values()[c] == inst.truth_beta.values()[c]
                    })
                    .count();
                assert_eq!(common, 8);
                assert!((2.0 - 1e-9..=24.0 + 1e-9).contains(h), "{h}");
            }
        }
    }

    #[test]
    fn full_overlap_sources_have_no_shift_unless_alternate() {
        let inst = generate(&SimDesign {
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        for (bj, h) in inst.truth_source_betas.iter().zip(&inst.source_shifts) {
            if bj.nnz() == 12 {
                assert_eq!(*h, 0.0);
                assert_eq!(bj, &inst.truth_beta);
            } else {
                assert!(*h >= 2.0 - 1e-9);
            }
        }
    }

    #[test]
    fn invalid_designs() {
        for d in [
            SimDesign {
                corruption_fraction: 1.5,
                ..Default::default()
            },
            SimDesign {
                target_sparsity: 500,
                ..Default::default()
            },
            SimDesign {
                shared_support_size: 13,
                ..Default::default()
            },
            SimDesign {
                shift_low: 5.0,
                shift_high: 1.0,
                ..Default::default()
            },
        ] {
            assert!(generate(&d).is_err());
        }
    }

    #[test]
    fn column_variance_matches_scaling() {
        let d = SimDesign {
            n_target: 2000,
            p: 20,
            target_sparsity: 3,
            shared_support_size: 3,
            source_sparsity_alt: 5,
            num_sources: 0,
            ..Default::default()
        };
        let inst = generate(&d).unwrap();
        let want = 1.0 / 2000f64.sqrt();
        for col in inst.target.design().columns() {
            let var = col.dot(&col) / 2000.0;
            assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
        }
    }
}
