//! Dual-path residual state-transition adapter.
//!
//! ```text
//! Δ_cond = Linear(2d→d) ∘ Dropout ∘ ReLU ∘ LayerNorm ∘ Linear(2d→2d) ([q; v_prev])
//! attn   = Wo · MultiHead(query = Wq q, keys = values = Wh H)
//! Δ_ctx  = attn + Linear(d→d) ∘ ReLU ∘ Linear(d→d) ∘ LayerNorm (attn)
//! v̂      = normalize(v_prev + Δ_cond + Δ_ctx)
//! ```
//!
//! The history `H` is left-padded with zero rows up to the context window
//! and the padded keys are masked out. An empty history skips the context
//! path entirely (`Δ_ctx = 0`).

use rand_chacha::ChaCha8Rng;

use super::{concat, glorot, impl_parameters, Parameters, PredictInput, Predictor};
use crate::error::{CvrError, Result};
use crate::math::{
    add_assign, dot, dropout_bwd, dropout_fwd, layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd,
    l2_normalize_bwd, normalize_with_floor, relu_bwd, relu_fwd, softmax_bwd, stable_softmax, LayerNormCache,
    Matrix,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CondPath {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtxPath {
    pub wq: Matrix,
    pub wh: Matrix,
    pub wo: Matrix,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub wa: Matrix,
    pub ba: Vec<f64>,
    pub wb: Matrix,
    pub bb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CastParams {
    pub d: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub cond: CondPath,
    pub ctx: CtxPath,
}

impl_parameters!(CastParams {
    "cond.w1" => cond.w1,
    "cond.b1" => cond.b1,
    "cond.ln_gamma" => cond.ln_gamma,
    "cond.ln_beta" => cond.ln_beta,
    "cond.w2" => cond.w2,
    "cond.b2" => cond.b2,
    "ctx.wq" => ctx.wq,
    "ctx.wh" => ctx.wh,
    "ctx.wo" => ctx.wo,
    "ctx.ln_gamma" => ctx.ln_gamma,
    "ctx.ln_beta" => ctx.ln_beta,
    "ctx.wa" => ctx.wa,
    "ctx.ba" => ctx.ba,
    "ctx.wb" => ctx.wb,
    "ctx.bb" => ctx.bb,
});

impl CastParams {
    /// All-zero weights (layer-norm gains included).
    pub fn zeros(d: usize, n_heads: usize, dropout_rate: f64) -> Result<Self> {
        check_dims(d, n_heads)?;
        let dd = 2 * d;
        Ok(CastParams {
            d,
            n_heads,
            dropout_rate,
            cond: CondPath {
                w1: Matrix::zeros(dd, dd),
                b1: vec![0.0; dd],
                ln_gamma: vec![0.0; dd],
                ln_beta: vec![0.0; dd],
                w2: Matrix::zeros(d, dd),
                b2: vec![0.0; d],
            },
            ctx: CtxPath {
                wq: Matrix::zeros(d, d),
                wh: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ln_gamma: vec![0.0; d],
                ln_beta: vec![0.0; d],
                wa: Matrix::zeros(d, d),
                ba: vec![0.0; d],
                wb: Matrix::zeros(d, d),
                bb: vec![0.0; d],
            },
        })
    }

    /// Glorot-uniform weights, zero biases, layer norms at gain 1 / shift 0.
    /// Each tensor draws from its own stream, so the result depends only on
    /// `(d, n_heads, seed)`.
    pub fn init(d: usize, n_heads: usize, dropout_rate: f64, seed_value: u64) -> Result<Self> {
        let mut p = Self::zeros(d, n_heads, dropout_rate)?;
        let dd = 2 * d;
        let g = |name: &str, rows, cols| glorot(rows, cols, &mut seed::stream(seed_value, &format!("init/{name}")));
        p.cond.w1 = g("cond.w1", dd, dd);
        p.cond.w2 = g("cond.w2", d, dd);
        p.ctx.wq = g("ctx.wq", d, d);
        p.ctx.wh = g("ctx.wh", d, d);
        p.ctx.wo = g("ctx.wo", d, d);
        p.ctx.wa = g("ctx.wa", d, d);
        p.ctx.wb = g("ctx.wb", d, d);
        p.cond.ln_gamma = vec![1.0; dd];
        p.ctx.ln_gamma = vec![1.0; d];
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

fn check_dims(d: usize, n_heads: usize) -> Result<()> {
    if d == 0 || n_heads == 0 || d % n_heads != 0 {
        return Err(CvrError::BadDims(format!("d = {d} is not a positive multiple of n_heads = {n_heads}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct CtxTape {
    query: Vec<f64>,
    query_proj: Vec<f64>,
    history: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    /// Attention probabilities, one vector per head.
    probs: Vec<Vec<f64>>,
    attn_concat: Vec<f64>,
    ln: LayerNormCache,
    ln_out: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CastTape {
    d: usize,
    cond_in: Vec<f64>,
    ln1: LayerNormCache,
    ln1_out: Vec<f64>,
    drop_mask: Vec<f64>,
    drop_out: Vec<f64>,
    ctx: Option<CtxTape>,
    v_hat: Vec<f64>,
    pre_norm: f64,
}

impl CastTape {
    pub fn used_context(&self) -> bool {
        self.ctx.is_some()
    }

    /// Smallest |pre-activation| over every ReLU in the pass.
    pub fn relu_margin(&self) -> f64 {
        let ctx = self.ctx.iter().flat_map(|c| c.hidden_pre.iter());
        super::min_abs(self.ln1_out.iter().chain(ctx))
    }
}

impl CastParams {
    fn ctx_forward(&self, query: &[f64], history: &[Vec<f64>], max_history: usize) -> Result<(Vec<f64>, CtxTape)> {
        let d = self.d;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let pad = max_history.max(history.len()) - history.len();
        let mut padded = vec![vec![0.0; d]; pad];
        padded.extend(history.iter().cloned());
        let masked: Vec<bool> = (0..padded.len()).map(|j| j < pad).collect();

        let query_proj = self.ctx.wq.matvec(query)?;
        let keys = padded
            .iter()
            .map(|h| self.ctx.wh.matvec(h))
            .collect::<Result<Vec<_>>>()?;

        let mut attn_concat = vec![0.0; d];
        let mut probs = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let r = head * hd..(head + 1) * hd;
            let logits: Vec<f64> = keys.iter().map(|k| dot(&query_proj[r.clone()], &k[r.clone()]) * scale).collect();
            let p = stable_softmax(&logits, &masked)?;
            for (k, pj) in keys.iter().zip(&p) {
                for (o, kv) in attn_concat[r.clone()].iter_mut().zip(&k[r.clone()]) {
                    *o += pj * kv;
                }
            }
            probs.push(p);
        }
        let attn = self.ctx.wo.matvec(&attn_concat)?;
        let (ln_out, ln) = layer_norm_fwd(&attn, &self.ctx.ln_gamma, &self.ctx.ln_beta)?;
        let hidden_pre = linear_fwd(&ln_out, &self.ctx.wa, &self.ctx.ba)?;
        let hidden = relu_fwd(&hidden_pre);
        let mut delta = linear_fwd(&hidden, &self.ctx.wb, &self.ctx.bb)?;
        add_assign(&mut delta, &attn);
        Ok((
            delta,
            CtxTape {
                query: query.to_vec(),
                query_proj,
                history: padded,
                keys,
                probs,
                attn_concat,
                ln,
                ln_out,
                hidden_pre,
                hidden,
            },
        ))
    }

    fn ctx_backward(&self, t: &CtxTape, grad: &[f64], g: &mut CastParams) -> Result<()> {
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        g.ctx.wb.add_outer(grad, &t.hidden);
        add_assign(&mut g.ctx.bb, grad);
        let g_pre = relu_bwd(&t.hidden_pre, &self.ctx.wb.matvec_t(grad)?);
        g.ctx.wa.add_outer(&g_pre, &t.ln_out);
        add_assign(&mut g.ctx.ba, &g_pre);
        let g_ln_out = self.ctx.wa.matvec_t(&g_pre)?;
        let (g_attn_ln, g_gamma, g_beta) = layer_norm_bwd(&t.ln, &self.ctx.ln_gamma, &g_ln_out);
        add_assign(&mut g.ctx.ln_gamma, &g_gamma);
        add_assign(&mut g.ctx.ln_beta, &g_beta);
        let mut g_attn = grad.to_vec();
        add_assign(&mut g_attn, &g_attn_ln);

        g.ctx.wo.add_outer(&g_attn, &t.attn_concat);
        let g_concat = self.ctx.wo.matvec_t(&g_attn)?;

        let mut g_qp = vec![0.0; self.d];
        let mut g_keys = vec![vec![0.0; self.d]; t.keys.len()];
        for (head, p) in t.probs.iter().enumerate() {
            let r = head * hd..(head + 1) * hd;
            let g_out = &g_concat[r.clone()];
            let g_p: Vec<f64> = t.keys.iter().map(|k| dot(g_out, &k[r.clone()])).collect();
            let g_logits = softmax_bwd(p, &g_p);
            for (j, k) in t.keys.iter().enumerate() {
                let (pj, gl) = (p[j], g_logits[j] * scale);
                for (idx, c) in r.clone().enumerate() {
                    g_keys[j][c] += pj * g_out[idx] + gl * t.query_proj[c];
                    g_qp[c] += gl * k[c];
                }
            }
        }
        g.ctx.wq.add_outer(&g_qp, &t.query);
        for (gk, h) in g_keys.iter().zip(&t.history) {
            g.ctx.wh.add_outer(gk, h);
        }
        Ok(())
    }
}

impl Predictor for CastParams {
    type Tape = CastTape;

    fn forward(&self, input: &PredictInput<'_>, rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, CastTape)> {
        let d = self.d;
        for (what, v) in [("query", input.query), ("anchor", input.anchor)] {
            if v.len() != d {
                return Err(CvrError::shape(if what == "query" { "cast query" } else { "cast anchor" }, d, v.len()));
            }
        }
        if input.history.len() > input.max_history {
            return Err(CvrError::HistoryTooLong {
                len: input.history.len(),
                max: input.max_history,
            });
        }
        if let Some(h) = input.history.iter().find(|h| h.len() != d) {
            return Err(CvrError::shape("cast history", d, h.len()));
        }

        let cond_in = concat(&[input.query, input.anchor]);
        let h1 = linear_fwd(&cond_in, &self.cond.w1, &self.cond.b1)?;
        let (ln1_out, ln1) = layer_norm_fwd(&h1, &self.cond.ln_gamma, &self.cond.ln_beta)?;
        let r1 = relu_fwd(&ln1_out);
        let (drop_out, drop_mask) = match rng {
            Some(rng) => dropout_fwd(&r1, self.dropout_rate, rng),
            None => (r1.clone(), vec![1.0; r1.len()]),
        };
        let delta_cond = linear_fwd(&drop_out, &self.cond.w2, &self.cond.b2)?;

        let mut s = input.anchor.to_vec();
        add_assign(&mut s, &delta_cond);
        let ctx = if input.history.is_empty() {
            None
        } else {
            let (delta_ctx, tape) = self.ctx_forward(input.query, input.history, input.max_history)?;
            add_assign(&mut s, &delta_ctx);
            Some(tape)
        };
        let out = normalize_with_floor(&s);
        Ok((
            out.unit.clone(),
            CastTape {
                d,
                cond_in,
                ln1,
                ln1_out,
                drop_mask,
                drop_out,
                ctx,
                v_hat: out.unit,
                pre_norm: out.input_norm,
            },
        ))
    }

    fn backward(&self, tape: &CastTape, grad_out: &[f64]) -> Result<CastParams> {
        if tape.d != self.d || tape.cond_in.len() != 2 * self.d {
            return Err(CvrError::TapeMismatch(format!("tape d = {}, params d = {}", tape.d, self.d)));
        }
        if grad_out.len() != self.d {
            return Err(CvrError::shape("cast upstream gradient", self.d, grad_out.len()));
        }
        if let Some(c) = &tape.ctx {
            if c.probs.len() != self.n_heads {
                return Err(CvrError::TapeMismatch(format!(
                    "tape has {} heads, params have {}",
                    c.probs.len(),
                    self.n_heads
                )));
            }
        }
        let mut g = self.zeros_like();
        let g_s = l2_normalize_bwd(&tape.v_hat, tape.pre_norm, grad_out);

        let l2 = linear_bwd(&tape.drop_out, &self.cond.w2, &g_s)?;
        g.cond.w2 = l2.w;
        g.cond.b2 = l2.b;
        let g_r1 = dropout_bwd(&tape.drop_mask, &l2.x);
        let g_ln = relu_bwd(&tape.ln1_out, &g_r1);
        let (g_h1, g_gamma, g_beta) = layer_norm_bwd(&tape.ln1, &self.cond.ln_gamma, &g_ln);
        g.cond.ln_gamma = g_gamma;
        g.cond.ln_beta = g_beta;
        let l1 = linear_bwd(&tape.cond_in, &self.cond.w1, &g_h1)?;
        g.cond.w1 = l1.w;
        g.cond.b1 = l1.b;

        if let Some(c) = &tape.ctx {
            self.ctx_backward(c, &g_s, &mut g)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::Parameters;
    use crate::math::{l2_normalize, norm};
    use rand::{Rng, SeedableRng};

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn zero_params_are_identity_on_anchor() {
        let p = CastParams::zeros(8, 2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = unit(&mut rng, 8);
        let v = unit(&mut rng, 8);
        let hist = vec![unit(&mut rng, 8), v.clone()];
        let input = PredictInput { query: &q, anchor: &v, history: &hist, max_history: 3 };
        let out = p.predict(&input).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_history_skips_context_path() {
        let p = CastParams::init(8, 2, 0.1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = unit(&mut rng, 8);
        let v = unit(&mut rng, 8);
        let (out, tape) = p
            .forward(&PredictInput { query: &q, anchor: &v, history: &[], max_history: 3 }, None)
            .unwrap();
        assert!(!tape.used_context());
        let h1 = linear_fwd(&concat(&[&q, &v]), &p.cond.w1, &p.cond.b1).unwrap();
        let (n1, _) = layer_norm_fwd(&h1, &p.cond.ln_gamma, &p.cond.ln_beta).unwrap();
        let delta = linear_fwd(&relu_fwd(&n1), &p.cond.w2, &p.cond.b2).unwrap();
        let expected = l2_normalize(&v.iter().zip(&delta).map(|(a, b)| a + b).collect::<Vec<_>>()).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((norm(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn padding_is_bit_invariant() {
        let p = CastParams::init(16, 4, 0.1, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = unit(&mut rng, 16);
        let hist = vec![unit(&mut rng, 16), unit(&mut rng, 16)];
        let v = hist[1].clone();
        let short = p.predict(&PredictInput { query: &q, anchor: &v, history: &hist, max_history: 2 }).unwrap();
        let long = p.predict(&PredictInput { query: &q, anchor: &v, history: &hist, max_history: 5 }).unwrap();
        assert_eq!(short, long);
    }

    #[test]
    fn shape_and_length_errors() {
        let p = CastParams::init(8, 2, 0.1, 1).unwrap();
        let q = vec![0.5; 8];
        let hist = vec![vec![0.5; 8]; 3];
        assert!(matches!(
            p.forward(&PredictInput { query: &q, anchor: &q, history: &hist, max_history: 2 }, None),
            Err(CvrError::HistoryTooLong { len: 3, max: 2 })
        ));
        assert!(matches!(
            p.forward(&PredictInput { query: &q[..4], anchor: &q, history: &[], max_history: 2 }, None),
            Err(CvrError::ShapeMismatch { .. })
        ));
        assert!(matches!(CastParams::init(10, 8, 0.1, 1), Err(CvrError::BadDims(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = CastParams::init(64, 8, 0.1, 11).unwrap();
        let b = CastParams::init(64, 8, 0.1, 11).unwrap();
        let c = CastParams::init(64, 8, 0.1, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.head_dim(), 8);
        assert!(a.cond.b1.iter().all(|x| *x == 0.0));
        assert!(a.ctx.ln_gamma.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn init_weight_mean_within_three_standard_errors() {
        let p = CastParams::init(64, 8, 0.1, 2024).unwrap();
        let w = &p.cond.w1;
        let n = w.data.len();
        assert!(n >= 10_000);
        let a = (6.0 / (w.rows + w.cols) as f64).sqrt();
        let mean = w.data.iter().sum::<f64>() / n as f64;
        // variance of U(-a, a) is a²/3
        let se = (a * a / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
        assert!(w.data.iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let p = CastParams::init(8, 2, 0.1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = unit(&mut rng, 8);
        let hist = vec![unit(&mut rng, 8)];
        let (_, tape) = p
            .forward(&PredictInput { query: &q, anchor: &hist[0], history: &hist, max_history: 3 }, None)
            .unwrap();
        let g = p.backward(&tape, &[0.0; 8]).unwrap();
        assert!(g.flatten().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tape_mismatch_detected() {
        let small = CastParams::init(8, 2, 0.1, 1).unwrap();
        let big = CastParams::init(16, 2, 0.1, 1).unwrap();
        let q = vec![0.5; 8];
        let (_, tape) = small
            .forward(&PredictInput { query: &q, anchor: &q, history: &[], max_history: 1 }, None)
            .unwrap();
        assert!(matches!(big.backward(&tape, &[0.0; 16]), Err(CvrError::TapeMismatch(_))));
    }

    #[test]
    fn eval_mode_consumes_no_randomness() {
        let p = CastParams::init(8, 2, 0.5, 1).unwrap();
        let q = vec![0.5; 8];
        let input = PredictInput { query: &q, anchor: &q, history: &[], max_history: 1 };
        let a = p.predict(&input).unwrap();
        let b = p.predict(&input).unwrap();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let t1 = p.forward(&input, Some(&mut r1)).unwrap().0;
        let t2 = p.forward(&input, Some(&mut r2)).unwrap().0;
        assert_eq!(t1, t2);
    }
}
