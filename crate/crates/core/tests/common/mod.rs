//! Shared helpers for the integration tests: seeded random data and
//! central finite differences.
#![allow(dead_code)]

pub mod grad;
pub mod protocol;

use cvr_core::adapter::Parameters;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// truncation error do not divide by ~0.
pub const FLOOR: f64 = 1e-6;
/// Instances with any ReLU pre-activation closer than this to the kink are
/// resampled; a step of `STEP` cannot cross it.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = random_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.1 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let hi = f(&x);
            x[i] = orig - STEP;
            let lo = f(&x);
            x[i] = orig;
            (hi - lo) / (2.0 * STEP)
        })
        .collect()
}

/// Central differences of `f` with respect to every parameter value, in
/// `Parameters::flatten` order.
pub fn numeric_param_grad<P: Parameters>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let n = p.param_count();
    let mut work = p.clone();
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let orig = nth_value(&mut work, flat, None);
        nth_value(&mut work, flat, Some(orig + STEP));
        let hi = f(&work);
        nth_value(&mut work, flat, Some(orig - STEP));
        let lo = f(&work);
        nth_value(&mut work, flat, Some(orig));
        out.push((hi - lo) / (2.0 * STEP));
    }
    out
}

fn nth_value<P: Parameters>(p: &mut P, mut idx: usize, set: Option<f64>) -> f64 {
    for (_, t) in p.tensors_mut() {
        if idx < t.len() {
            let old = t[idx];
            if let Some(v) = set {
                t[idx] = v;
            }
            return old;
        }
        idx -= t.len();
    }
    panic!("parameter index out of range");
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

#[track_caller]
pub fn assert_grad_close(what: &str, analytic: &[f64], numeric: &[f64]) {
    let err = max_rel_err(analytic, numeric);
    assert!(err < TOL, "{what}: max relative error {err:.3e} >= {TOL:e}");
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
