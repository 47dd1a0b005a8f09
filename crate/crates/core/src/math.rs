//! Dense-vector primitives with forward and vector-Jacobian backward forms.
//!
//! Everything here works on `f64` slices. Vectors are plain `Vec<f64>`; the
//! only structured type is [`Matrix`], a row-major dense matrix used by the
//! linear layers. Every `_bwd` function takes the upstream gradient of the
//! corresponding `_fwd` output and returns gradients for its inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CvrError, Result};

/// Norm floor for L2 normalization.
pub const EPS_NORM: f64 = 1e-12;
/// Variance epsilon inside layer normalization.
pub const EPS_LN: f64 = 1e-5;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn scale(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|v| v * s).collect()
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(CvrError::shape(context, expected, actual));
    }
    Ok(())
}

/// Scales `x` to unit Euclidean norm.
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n <= EPS_NORM {
        return Err(CvrError::NormUnderflow { norm: n });
    }
    Ok(scale(x, 1.0 / n))
}

/// Backward of `y = x / |x|` given the forward output `y` and input norm.
pub fn l2_normalize_bwd(y: &[f64], input_norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| (gi - yi * proj) / input_norm)
        .collect()
}

/// Output of [`normalize_with_floor`]: the unit vector plus what backward needs.
#[derive(Debug, Clone)]
pub struct FlooredNorm {
    pub unit: Vec<f64>,
    pub input_norm: f64,
}

/// Normalizes `x`; if its norm is at or below [`EPS_NORM`] a fixed nudge of
/// `1e-6` is added to the first coordinate first, so the output is always a
/// unit vector. The nudge is a constant, so the backward pass is the plain
/// normalization Jacobian evaluated at the nudged point.
pub fn normalize_with_floor(x: &[f64]) -> FlooredNorm {
    let mut v = x.to_vec();
    let mut n = norm(&v);
    if n <= EPS_NORM && !v.is_empty() {
        v[0] += 1e-6;
        n = norm(&v);
    }
    FlooredNorm {
        unit: scale(&v, 1.0 / n),
        input_norm: n,
    }
}

/// Cosine similarity. Both inputs must be nonzero.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine_sim", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na <= EPS_NORM {
        return Err(CvrError::NormUnderflow { norm: na });
    }
    if nb <= EPS_NORM {
        return Err(CvrError::NormUnderflow { norm: nb });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `a`, scaled by `grad`.
pub fn cosine_sim_bwd(a: &[f64], b: &[f64], grad: f64) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    let cos = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| grad * (bi / (na * nb) - cos * ai / (na * na)))
        .collect()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `Wᵀ g`
    pub fn matvec_t(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec_t", self.rows, g.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
        Ok(out)
    }

    /// `self += g xᵀ`
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, xc) in row.iter_mut().zip(x) {
                *w += gr * xc;
            }
        }
    }
}

/// `y = W x + b`
pub fn linear_fwd(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_len("linear_fwd bias", w.rows, b.len())?;
    let mut y = w.matvec(x)?;
    add_assign(&mut y, b);
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub x: Vec<f64>,
    pub w: Matrix,
    pub b: Vec<f64>,
}

pub fn linear_bwd(x: &[f64], w: &Matrix, grad_y: &[f64]) -> Result<LinearGrads> {
    check_len("linear_bwd input", w.cols, x.len())?;
    let gx = w.matvec_t(grad_y)?;
    let mut gw = Matrix::zeros(w.rows, w.cols);
    gw.add_outer(grad_y, x);
    Ok(LinearGrads {
        x: gx,
        w: gw,
        b: grad_y.to_vec(),
    })
}

/// Values cached by [`layer_norm_fwd`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: f64,
}

/// `y = gamma ⊙ (x − mean) / sqrt(var + eps) + beta`
pub fn layer_norm_fwd(x: &[f64], gamma: &[f64], beta: &[f64]) -> Result<(Vec<f64>, LayerNormCache)> {
    check_len("layer_norm gamma", x.len(), gamma.len())?;
    check_len("layer_norm beta", x.len(), beta.len())?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + EPS_LN).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = x_hat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(xh, (g, b))| g * xh + b)
        .collect();
    Ok((y, LayerNormCache { x_hat, inv_std }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_bwd(cache: &LayerNormCache, gamma: &[f64], grad_y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = grad_y.len() as f64;
    let g_gamma: Vec<f64> = grad_y.iter().zip(&cache.x_hat).map(|(g, xh)| g * xh).collect();
    let g_beta = grad_y.to_vec();
    let g_xhat: Vec<f64> = grad_y.iter().zip(gamma).map(|(g, ga)| g * ga).collect();
    let sum_g: f64 = g_xhat.iter().sum();
    let sum_gx: f64 = g_xhat.iter().zip(&cache.x_hat).map(|(g, xh)| g * xh).sum();
    let g_x = g_xhat
        .iter()
        .zip(&cache.x_hat)
        .map(|(g, xh)| cache.inv_std / n * (n * g - sum_g - xh * sum_gx))
        .collect();
    (g_x, g_gamma, g_beta)
}

/// Softmax over the positions where `masked[i]` is false. Masked positions
/// receive probability exactly zero.
pub fn stable_softmax(logits: &[f64], masked: &[bool]) -> Result<Vec<f64>> {
    check_len("stable_softmax mask", logits.len(), masked.len())?;
    let max = logits
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(CvrError::AllMasked);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(masked)
        .map(|(l, m)| if *m { 0.0 } else { (l - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    Ok(out)
}

/// Backward of softmax given its output probabilities.
pub fn softmax_bwd(probs: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_p);
    probs.iter().zip(grad_p).map(|(p, g)| p * (g - inner)).collect()
}

pub fn relu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Backward of ReLU given the forward input.
pub fn relu_bwd(x: &[f64], grad_y: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_y)
        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
        .collect()
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Returns the
/// output and the per-unit multiplier, which is all backward needs.
pub fn dropout_fwd<R: Rng + ?Sized>(x: &[f64], rate: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    if rate <= 0.0 {
        return (x.to_vec(), vec![1.0; x.len()]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
    (y, mask)
}

pub fn dropout_bwd(mask: &[f64], grad_y: &[f64]) -> Vec<f64> {
    mask.iter().zip(grad_y).map(|(m, g)| m * g).collect()
}
