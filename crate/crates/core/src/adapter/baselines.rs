//! Trainable baselines.
//!
//! * Early fusion: a two-layer MLP over `[q; v_prev; mean(history)]` that
//!   either predicts the next state directly or predicts a residual added
//!   to the anchor.
//! * Learned late fusion: a two-layer MLP over the score pair
//!   `(semantic, visual)` producing one ranking score per candidate.

use rand_chacha::ChaCha8Rng;

use super::{concat, glorot, impl_parameters, Parameters, PredictInput, Predictor};
use crate::error::{CvrError, Result};
use crate::math::{add_assign, l2_normalize_bwd, linear_bwd, linear_fwd, normalize_with_floor, relu_bwd, relu_fwd, Matrix};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyFusionParams {
    pub d: usize,
    pub hidden: usize,
    /// Predict `Δ` and add it to the anchor instead of predicting `v̂`.
    pub residual: bool,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl_parameters!(EarlyFusionParams {
    "w1" => w1,
    "b1" => b1,
    "w2" => w2,
    "b2" => b2,
});

impl EarlyFusionParams {
    pub fn zeros(d: usize, hidden: usize, residual: bool) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(CvrError::BadDims(format!("early fusion needs d, hidden > 0 (got {d}, {hidden})")));
        }
        Ok(EarlyFusionParams {
            d,
            hidden,
            residual,
            w1: Matrix::zeros(hidden, 3 * d),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(d, hidden),
            b2: vec![0.0; d],
        })
    }

    pub fn init(d: usize, hidden: usize, residual: bool, seed_value: u64) -> Result<Self> {
        let mut p = Self::zeros(d, hidden, residual)?;
        p.w1 = glorot(hidden, 3 * d, &mut seed::stream(seed_value, "init/ef.w1"));
        p.w2 = glorot(d, hidden, &mut seed::stream(seed_value, "init/ef.w2"));
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct EarlyFusionTape {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    v_hat: Vec<f64>,
    pre_norm: f64,
}

impl EarlyFusionTape {
    /// Smallest |pre-activation| over the hidden ReLU.
    pub fn relu_margin(&self) -> f64 {
        super::min_abs(self.hidden_pre.iter())
    }
}

fn mean_pool(history: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    if history.is_empty() {
        return m;
    }
    for h in history {
        add_assign(&mut m, h);
    }
    let n = history.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

impl Predictor for EarlyFusionParams {
    type Tape = EarlyFusionTape;

    fn forward(&self, input: &PredictInput<'_>, _rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, EarlyFusionTape)> {
        let d = self.d;
        if input.query.len() != d || input.anchor.len() != d {
            return Err(CvrError::shape("early fusion input", d, input.query.len().max(input.anchor.len())));
        }
        if input.history.len() > input.max_history {
            return Err(CvrError::HistoryTooLong {
                len: input.history.len(),
                max: input.max_history,
            });
        }
        if let Some(h) = input.history.iter().find(|h| h.len() != d) {
            return Err(CvrError::shape("early fusion history", d, h.len()));
        }
        let pooled = mean_pool(input.history, d);
        let x = concat(&[input.query, input.anchor, &pooled]);
        let hidden_pre = linear_fwd(&x, &self.w1, &self.b1)?;
        let hidden = relu_fwd(&hidden_pre);
        let mut s = linear_fwd(&hidden, &self.w2, &self.b2)?;
        if self.residual {
            add_assign(&mut s, input.anchor);
        }
        let out = normalize_with_floor(&s);
        Ok((
            out.unit.clone(),
            EarlyFusionTape {
                input: x,
                hidden_pre,
                hidden,
                v_hat: out.unit,
                pre_norm: out.input_norm,
            },
        ))
    }

    fn backward(&self, tape: &EarlyFusionTape, grad_out: &[f64]) -> Result<Self> {
        if tape.input.len() != 3 * self.d || tape.hidden.len() != self.hidden {
            return Err(CvrError::TapeMismatch("early fusion tape does not match parameters".into()));
        }
        if grad_out.len() != self.d {
            return Err(CvrError::shape("early fusion upstream gradient", self.d, grad_out.len()));
        }
        let mut g = self.zeros_like();
        let g_s = l2_normalize_bwd(&tape.v_hat, tape.pre_norm, grad_out);
        let l2 = linear_bwd(&tape.hidden, &self.w2, &g_s)?;
        let g_pre = relu_bwd(&tape.hidden_pre, &l2.x);
        let l1 = linear_bwd(&tape.input, &self.w1, &g_pre)?;
        g.w1 = l1.w;
        g.b1 = l1.b;
        g.w2 = l2.w;
        g.b2 = l2.b;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LateFusionParams {
    pub hidden: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl_parameters!(LateFusionParams {
    "w1" => w1,
    "b1" => b1,
    "w2" => w2,
    "b2" => b2,
});

#[derive(Debug, Clone)]
pub struct LateFusionTape {
    input: [f64; 2],
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl LateFusionTape {
    pub fn relu_margin(&self) -> f64 {
        super::min_abs(self.hidden_pre.iter())
    }
}

impl LateFusionParams {
    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(CvrError::BadDims("late fusion needs hidden > 0".into()));
        }
        Ok(LateFusionParams {
            hidden,
            w1: Matrix::zeros(hidden, 2),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(1, hidden),
            b2: vec![0.0],
        })
    }

    pub fn init(hidden: usize, seed_value: u64) -> Result<Self> {
        let mut p = Self::zeros(hidden)?;
        p.w1 = glorot(hidden, 2, &mut seed::stream(seed_value, "init/lf.w1"));
        p.w2 = glorot(1, hidden, &mut seed::stream(seed_value, "init/lf.w2"));
        Ok(p)
    }

    /// Parameters whose output is `semantic + alpha * visual + const` for all
    /// scores in [-1, 1]: two hidden units pass the shifted inputs through
    /// the ReLU unchanged.
    pub fn weighted_sum(alpha: f64, hidden: usize) -> Result<Self> {
        if hidden < 2 {
            return Err(CvrError::BadDims("weighted_sum needs at least 2 hidden units".into()));
        }
        let mut p = Self::zeros(hidden)?;
        p.w1.data[0] = 1.0; // unit 0 <- semantic
        p.w1.data[3] = 1.0; // unit 1 <- visual
        p.b1[0] = 2.0;
        p.b1[1] = 2.0;
        p.w2.data[0] = 1.0;
        p.w2.data[1] = alpha;
        Ok(p)
    }

    pub fn forward(&self, semantic: f64, visual: f64) -> Result<(f64, LateFusionTape)> {
        let input = [semantic, visual];
        let hidden_pre = linear_fwd(&input, &self.w1, &self.b1)?;
        let hidden = relu_fwd(&hidden_pre);
        let out = linear_fwd(&hidden, &self.w2, &self.b2)?[0];
        Ok((out, LateFusionTape { input, hidden_pre, hidden }))
    }

    pub fn score(&self, semantic: f64, visual: f64) -> Result<f64> {
        Ok(self.forward(semantic, visual)?.0)
    }

    pub fn backward(&self, tape: &LateFusionTape, grad_out: f64) -> Result<Self> {
        if tape.hidden.len() != self.hidden {
            return Err(CvrError::TapeMismatch("late fusion tape does not match parameters".into()));
        }
        let mut g = self.zeros_like();
        let l2 = linear_bwd(&tape.hidden, &self.w2, &[grad_out])?;
        let g_pre = relu_bwd(&tape.hidden_pre, &l2.x);
        let l1 = linear_bwd(&tape.input, &self.w1, &g_pre)?;
        g.w1 = l1.w;
        g.b1 = l1.b;
        g.w2 = l2.w;
        g.b2 = l2.b;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;

    #[test]
    fn residual_zero_params_return_anchor() {
        let p = EarlyFusionParams::zeros(4, 8, true).unwrap();
        let v = vec![0.5, 0.5, 0.5, 0.5];
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let out = p
            .predict(&PredictInput { query: &q, anchor: &v, history: &[v.clone()], max_history: 5 })
            .unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn direct_zero_params_hit_norm_floor() {
        let p = EarlyFusionParams::zeros(4, 8, false).unwrap();
        let v = vec![0.5; 4];
        let out = p
            .predict(&PredictInput { query: &v, anchor: &v, history: &[], max_history: 5 })
            .unwrap();
        assert!((norm(&out) - 1.0).abs() < 1e-12);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn weighted_sum_late_fusion() {
        let p = LateFusionParams::weighted_sum(0.3, 8).unwrap();
        let base = p.score(0.0, 0.0).unwrap();
        for (a, b) in [(0.2, -0.5), (-1.0, 1.0), (0.9, 0.1)] {
            let s = p.score(a, b).unwrap();
            assert!((s - base - (a + 0.3 * b)).abs() < 1e-12);
        }
    }
}
