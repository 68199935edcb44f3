#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A small Gaussian regression instance.
pub struct Instance {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub lambda: f64,
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(rng))
}

/// `n` in `n_min..=n_max`, `p` in `1..=p_max`, a sparse truth plus noise and
/// `lambda` a random fraction of the smallest penalty giving zero.
pub fn instance(seed: u64, n_min: usize, n_max: usize, p_max: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(n_min..=n_max);
    let p = rng.random_range(1..=p_max);
    let x = gaussian(&mut rng, n, p);
    let beta = Array1::from_shape_simple_fn(p, || {
        if rng.random_bool(0.5) {
            rng.random_range(-2.0..2.0)
        } else {
            0.0
        }
    });
    let noise: Array1<f64> = Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng));
    let y = x.dot(&beta) + noise * 0.3;
    let lmax = x.t().dot(&y).iter().fold(0.0f64, |m, v| m.max(v.abs())) / n as f64;
    let lambda = lmax * rng.random_range(0.02..1.1);
    Instance { x, y, lambda }
}

fn objective(x: &Array2<f64>, y: &Array1<f64>, w: &[f64], lambda: f64, b: &Array1<f64>) -> f64 {
    let n = x.nrows() as f64;
    let r = y - &x.dot(b);
    r.dot(&r) / (2.0 * n) + lambda * b.iter().zip(w).map(|(v, w)| w * v.abs()).sum::<f64>()
}

/// Minimiser of `(1/2n)||y - X b||^2 + lambda sum_j w_j |b_j|` by enumerating
/// every support and sign pattern, solving the stationarity equations, and
/// keeping the cheapest candidate that passes the KKT check.
pub fn exhaustive_lasso(
    x: &Array2<f64>,
    y: &Array1<f64>,
    lambda: f64,
    w: Option<&[f64]>,
) -> Array1<f64> {
    let (n, p) = x.dim();
    assert!(p <= 16, "exhaustive oracle is for tiny problems");
    let ones = vec![1.0; p];
    let w = w.unwrap_or(&ones);
    let gram = x.t().dot(x) / n as f64;
    let corr = x.t().dot(y) / n as f64;
    let slack = 1e-9 * (1.0 + lambda);

    let mut best = Array1::zeros(p);
    let mut best_obj = f64::INFINITY;
    for mask in 0u32..(1 << p) {
        let s: Vec<usize> = (0..p).filter(|j| mask >> j & 1 == 1).collect();
        let k = s.len();
        let g = DMatrix::from_fn(k, k, |a, b| gram[[s[a], s[b]]]);
        let Some(chol) = g.clone().cholesky() else {
            continue;
        };
        for signs in 0u32..(1 << k) {
            let sign = |a: usize| if signs >> a & 1 == 1 { -1.0 } else { 1.0 };
            let rhs = DVector::from_fn(k, |a, _| corr[s[a]] - lambda * w[s[a]] * sign(a));
            let sol = chol.solve(&rhs);
            if (0..k).any(|a| sol[a] * sign(a) <= 0.0) {
                continue;
            }
            let mut b = Array1::zeros(p);
            for a in 0..k {
                b[s[a]] = sol[a];
            }
            let grad = &gram.dot(&b) - &corr;
            let kkt_ok = (0..p)
                .filter(|j| mask >> j & 1 == 0)
                .all(|j| grad[j].abs() <= lambda * w[j] + slack);
            if !kkt_ok {
                continue;
            }
            let obj = objective(x, y, w, lambda, &b);
            if obj < best_obj {
                best_obj = obj;
                best = b;
            }
        }
    }
    assert!(best_obj.is_finite(), "no support passed the KKT check");
    best
}

pub fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()))
}

/// `[X, sqrt(n) I]`
pub fn augmented(x: &Array2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let mut out = Array2::zeros((n, p + n));
    out.slice_mut(ndarray::s![.., ..p]).assign(x);
    let root = (n as f64).sqrt();
    for i in 0..n {
        out[[i, p + i]] = root;
    }
    out
}
