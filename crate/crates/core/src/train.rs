//! Type-aware contrastive training.
//!
//! The objective is in-batch InfoNCE plus two local contrastive terms, one
//! against same-video state negatives and one against cross-video identity
//! negatives:
//!
//! ```text
//! L = L_batch + λ_s · mean(L_state) + λ_i · mean(L_ident)
//! ```
//!
//! Gradients flow only into the predicted embeddings; every input feature is
//! frozen. Parameters are updated with AdamW (decoupled weight decay).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{LateFusionParams, Parameters, PredictInput, Predictor};
use crate::bench::TrainingSkeleton;
use crate::data::{EmbeddingStore, RunConfig};
use crate::error::{CvrError, Result};
use crate::math::{add_assign, dot, norm, EPS_NORM};
use crate::seed;

/// Cosine similarity without clamping, so it stays differentiable at ±1.
fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// `∂cos(a, b)/∂a`, scaled by `g`, accumulated into `out`.
fn cos_grad_into(a: &[f64], b: &[f64], g: f64, out: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
        *o += g * (bi / (na * nb) - c * ai / (na * na));
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// In-batch InfoNCE over `B` predictions and their positives. Returns the
/// mean loss and the gradient with respect to each prediction.
pub fn loss_batch(v_hats: &[Vec<f64>], v_pos: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if v_hats.len() != v_pos.len() {
        return Err(CvrError::shape("loss_batch positives", v_hats.len(), v_pos.len()));
    }
    let b = v_hats.len();
    let mut grads = vec![vec![0.0; v_hats.first().map_or(0, Vec::len)]; b];
    if b == 0 {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = v_pos.iter().map(|p| cos(&v_hats[i], p) / tau).collect();
        total += log_sum_exp(&logits) - logits[i];
        let p = softmax(&logits);
        for (j, pj) in p.iter().enumerate() {
            let g = (pj - if i == j { 1.0 } else { 0.0 }) / (tau * b as f64);
            cos_grad_into(&v_hats[i], &v_pos[j], g, &mut grads[i]);
        }
    }
    Ok((total / b as f64, grads))
}

/// Local contrastive loss of one prediction against its positive and a set
/// of negatives. All-zero negatives (fallback slots) have similarity 0 and
/// so add `e^0 = 1` to the denominator; with `drop_zero` they are ignored.
/// An empty negative set gives loss 0.
pub fn loss_local(v_hat: &[f64], v_pos: &[f64], negs: &[Vec<f64>], tau: f64, drop_zero: bool) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; v_hat.len()];
    let negs: Vec<Option<&Vec<f64>>> = negs
        .iter()
        .map(|n| (norm(n) > EPS_NORM).then_some(n))
        .filter(|n| n.is_some() || !drop_zero)
        .collect();
    if negs.is_empty() {
        return (0.0, grad);
    }
    let mut logits = vec![cos(v_hat, v_pos) / tau];
    logits.extend(negs.iter().map(|n| n.map_or(0.0, |n| cos(v_hat, n) / tau)));
    let loss = log_sum_exp(&logits) - logits[0];
    let p = softmax(&logits);
    cos_grad_into(v_hat, v_pos, (p[0] - 1.0) / tau, &mut grad);
    for (n, pk) in negs.iter().zip(&p[1..]) {
        if let Some(n) = n {
            cos_grad_into(v_hat, n, pk / tau, &mut grad);
        }
    }
    (loss, grad)
}

/// Loss weights and temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub drop_zero_negatives: bool,
}

impl From<&RunConfig> for LossWeights {
    fn from(c: &RunConfig) -> Self {
        LossWeights {
            tau: c.tau,
            lambda_s: c.lambda_s,
            lambda_i: c.lambda_i,
            drop_zero_negatives: c.drop_zero_negatives,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub batch: f64,
    pub state: f64,
    pub ident: f64,
}

/// Full objective for one batch. `v_hats[i]` is the prediction for
/// `instances[i]`.
pub fn loss_total(
    v_hats: &[Vec<f64>],
    instances: &[&TrainingInstance],
    w: &LossWeights,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    if v_hats.is_empty() || v_hats.len() != instances.len() {
        return Err(CvrError::shape("loss_total batch", instances.len().max(1), v_hats.len()));
    }
    let b = v_hats.len() as f64;
    let pos: Vec<Vec<f64>> = instances.iter().map(|x| x.pos.clone()).collect();
    let (l_batch, mut grads) = loss_batch(v_hats, &pos, w.tau)?;
    let (mut l_state, mut l_ident) = (0.0, 0.0);
    for (i, (v, x)) in v_hats.iter().zip(instances).enumerate() {
        let (ls, gs) = loss_local(v, &x.pos, &x.state_negs, w.tau, w.drop_zero_negatives);
        let (li, gi) = loss_local(v, &x.pos, &x.ident_negs, w.tau, w.drop_zero_negatives);
        l_state += ls;
        l_ident += li;
        for ((g, a), c) in grads[i].iter_mut().zip(&gs).zip(&gi) {
            *g += w.lambda_s * a / b + w.lambda_i * c / b;
        }
    }
    let parts = LossParts {
        batch: l_batch,
        state: l_state / b,
        ident: l_ident / b,
        total: l_batch + w.lambda_s * l_state / b + w.lambda_i * l_ident / b,
    };
    Ok((parts, grads))
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: Parameters> OptimizerState<P> {
    pub fn new(params: &P) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update: `θ ← θ(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`.
pub fn adamw_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptimizerState<P>, opt: &AdamW) -> Result<()> {
    let n = params.param_count();
    for other in [grads.param_count(), state.m.param_count(), state.v.param_count()] {
        if other != n {
            return Err(CvrError::shape("adamw_step", n, other));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    let g_all = grads.tensors();
    let mut m_all = state.m.tensors_mut();
    let mut v_all = state.v.tensors_mut();
    for (ti, (_, theta)) in params.tensors_mut().into_iter().enumerate() {
        let g = g_all[ti].data;
        let m = &mut *m_all[ti].1;
        let v = &mut *v_all[ti].1;
        if g.len() != theta.len() || m.len() != theta.len() {
            return Err(CvrError::shape(g_all[ti].name, theta.len(), g.len()));
        }
        for k in 0..theta.len() {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + opt.eps);
            theta[k] = theta[k] * decay - opt.lr * update;
        }
    }
    Ok(())
}

/// One training example with all embeddings resolved. Negative lists always
/// have exactly the configured number of slots; slots without a mined clip
/// hold zero vectors and are flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub query_id: String,
    pub query: Vec<f64>,
    /// Most recent context clip, or zeros when the context is empty.
    pub anchor: Vec<f64>,
    pub history: Vec<Vec<f64>>,
    pub pos: Vec<f64>,
    pub state_negs: Vec<Vec<f64>>,
    pub ident_negs: Vec<Vec<f64>>,
    pub state_valid: Vec<bool>,
    pub ident_valid: Vec<bool>,
}

impl TrainingInstance {
    pub fn input(&self, max_history: usize) -> PredictInput<'_> {
        PredictInput {
            query: &self.query,
            anchor: &self.anchor,
            history: &self.history,
            max_history,
        }
    }
}

fn slots(ids: &[String], cap: usize, clips: &EmbeddingStore) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut vecs = Vec::with_capacity(cap.max(ids.len()));
    let mut valid = Vec::with_capacity(cap.max(ids.len()));
    for id in ids {
        vecs.push(clips.require(id, "clip")?.to_vec());
        valid.push(true);
    }
    while vecs.len() < cap {
        vecs.push(vec![0.0; clips.dim()]);
        valid.push(false);
    }
    Ok((vecs, valid))
}

/// Resolves training skeletons against the embedding stores, keeping at
/// most `context_len` context clips.
pub fn materialize(
    skeletons: &[TrainingSkeleton],
    clips: &EmbeddingStore,
    texts: &EmbeddingStore,
    context_len: usize,
    caps: (usize, usize),
) -> Result<Vec<TrainingInstance>> {
    if clips.dim() != texts.dim() {
        return Err(CvrError::DimMismatch {
            expected: clips.dim(),
            actual: texts.dim(),
        });
    }
    skeletons
        .iter()
        .map(|s| {
            let keep = s.context_ids.len().min(context_len);
            let ctx = &s.context_ids[s.context_ids.len() - keep..];
            let history = ctx
                .iter()
                .map(|id| clips.require(id, "clip").map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>>>()?;
            let anchor = history.last().cloned().unwrap_or_else(|| vec![0.0; clips.dim()]);
            let (state_negs, state_valid) = slots(&s.state_negs, caps.0, clips)?;
            let (ident_negs, ident_valid) = slots(&s.ident_negs, caps.1, clips)?;
            Ok(TrainingInstance {
                query_id: s.query_id.clone(),
                query: texts.require(&s.query_text_id, "text")?.to_vec(),
                anchor,
                history,
                pos: clips.require(&s.gt_clip_id, "clip")?.to_vec(),
                state_negs,
                ident_negs,
                state_valid,
                ident_valid,
            })
        })
        .collect()
}

/// Settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub opt: AdamW,
}

impl From<&RunConfig> for TrainSettings {
    fn from(c: &RunConfig) -> Self {
        TrainSettings {
            epochs: c.epochs,
            batch_size: c.batch_size,
            context_len: c.context_len,
            seed: c.seed,
            loss: LossWeights::from(c),
            opt: AdamW::new(c.lr, c.weight_decay),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batch: f64,
    pub state: f64,
    pub ident: f64,
}

/// Loss curve as CSV: `epoch,mean_loss,batch,state,ident`.
pub fn curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss,batch,state,ident\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.mean_loss, e.batch, e.state, e.ident));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput<P> {
    pub params: P,
    pub curve: Vec<EpochLoss>,
}

fn epoch_order(n: usize, seed_value: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream_with(seed_value, "epoch", &[epoch as u64]));
    order
}

fn accumulate(acc: &mut EpochLoss, parts: &LossParts, weight: f64) {
    acc.mean_loss += parts.total * weight;
    acc.batch += parts.batch * weight;
    acc.state += parts.state * weight;
    acc.ident += parts.ident * weight;
}

/// Trains a next-state predictor. Per-example forward and backward passes
/// run on the current rayon pool; gradients are summed in batch order, so
/// the result does not depend on the number of threads.
pub fn train_predictor<P: Predictor>(
    init: P,
    data: &[TrainingInstance],
    settings: &TrainSettings,
) -> Result<TrainOutput<P>> {
    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut curve = Vec::with_capacity(settings.epochs);
    let bs = settings.batch_size.max(1);
    let mut step = 0u64;
    for epoch in 0..settings.epochs {
        let order = epoch_order(data.len(), settings.seed, epoch);
        let mut acc = EpochLoss {
            epoch: epoch + 1,
            mean_loss: 0.0,
            batch: 0.0,
            state: 0.0,
            ident: 0.0,
        };
        for chunk in order.chunks(bs) {
            let batch: Vec<&TrainingInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let p = &params;
            let fwd = batch
                .par_iter()
                .enumerate()
                .map(|(pos, x)| {
                    let mut rng = seed::stream_with(settings.seed, "dropout", &[epoch as u64, step, pos as u64]);
                    p.forward(&x.input(settings.context_len), Some(&mut rng))
                })
                .collect::<Result<Vec<_>>>()?;
            let v_hats: Vec<Vec<f64>> = fwd.iter().map(|(v, _)| v.clone()).collect();
            let (parts, grads) = loss_total(&v_hats, &batch, &settings.loss)?;
            let per_example = fwd
                .par_iter()
                .zip(grads.par_iter())
                .map(|((_, tape), g)| p.backward(tape, g))
                .collect::<Result<Vec<_>>>()?;
            let mut total = params.zeros_like();
            for g in &per_example {
                Parameters::add_assign(&mut total, g);
            }
            adamw_step(&mut params, &total, &mut state, &settings.opt)?;
            accumulate(&mut acc, &parts, chunk.len() as f64 / data.len() as f64);
            step += 1;
        }
        curve.push(acc);
    }
    Ok(TrainOutput { params, curve })
}

/// Score pairs `(semantic, visual)` for the positive and every candidate
/// the late-fusion scorer is trained against.
fn late_fusion_pairs(x: &TrainingInstance, batch: &[&TrainingInstance]) -> Vec<(f64, f64)> {
    let has_ctx = norm(&x.anchor) > EPS_NORM;
    let pair = |c: &[f64]| (cos(&x.query, c), if has_ctx { cos(&x.anchor, c) } else { 0.0 });
    let mut out = vec![pair(&x.pos)];
    for (n, valid) in x.state_negs.iter().zip(&x.state_valid).chain(x.ident_negs.iter().zip(&x.ident_valid)) {
        if *valid {
            out.push(pair(n));
        }
    }
    for other in batch {
        if other.query_id != x.query_id {
            out.push(pair(&other.pos));
        }
    }
    out
}

/// Trains the score-level late-fusion MLP with a softmax cross-entropy over
/// the positive, the instance's valid hard negatives and the other
/// positives in the batch. Logits are the MLP output divided by `tau`.
pub fn train_late_fusion(
    init: LateFusionParams,
    data: &[TrainingInstance],
    settings: &TrainSettings,
) -> Result<TrainOutput<LateFusionParams>> {
    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let tau = settings.loss.tau;
    let bs = settings.batch_size.max(1);
    let mut curve = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let order = epoch_order(data.len(), settings.seed, epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&TrainingInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let p = &params;
            let per_example = batch
                .par_iter()
                .map(|x| -> Result<(f64, LateFusionParams)> {
                    let pairs = late_fusion_pairs(x, &batch);
                    let fwd = pairs
                        .iter()
                        .map(|(a, b)| p.forward(*a, *b))
                        .collect::<Result<Vec<_>>>()?;
                    let logits: Vec<f64> = fwd.iter().map(|(s, _)| s / tau).collect();
                    let loss = log_sum_exp(&logits) - logits[0];
                    let probs = softmax(&logits);
                    let mut g = p.zeros_like();
                    for (k, ((_, tape), pk)) in fwd.iter().zip(&probs).enumerate() {
                        let gk = (pk - if k == 0 { 1.0 } else { 0.0 }) / (tau * batch.len() as f64);
                        g.add_assign(&p.backward(tape, gk)?);
                    }
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = params.zeros_like();
            let mut batch_loss = 0.0;
            for (l, g) in &per_example {
                batch_loss += l;
                total.add_assign(g);
            }
            adamw_step(&mut params, &total, &mut state, &settings.opt)?;
            epoch_loss += batch_loss / data.len() as f64;
        }
        curve.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: epoch_loss,
            batch: epoch_loss,
            state: 0.0,
            ident: 0.0,
        });
    }
    Ok(TrainOutput { params, curve })
}

/// Adds `scale · direction` to every value of `params`.
pub fn axpy<P: Parameters>(params: &mut P, direction: &P, scale: f64) {
    let src = direction.tensors();
    for ((_, dst), s) in params.tensors_mut().into_iter().zip(src) {
        let scaled: Vec<f64> = s.data.iter().map(|v| v * scale).collect();
        add_assign(dst, &scaled);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::CastParams;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn batch_of_one_has_zero_loss() {
        let v = unit(&[1.0, 2.0, 3.0]);
        let p = unit(&[-1.0, 0.5, 2.0]);
        let (l, _) = loss_batch(&[v], &[p], 0.07).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn batch_of_two_opposite() {
        let a = vec![1.0, 0.0];
        let b = vec![-1.0, 0.0];
        let (l, _) = loss_batch(&[a.clone(), b.clone()], &[a, b], 0.07).unwrap();
        let expected = (1.0 + (-2.0f64 / 0.07).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn local_loss_cases() {
        let v = unit(&[1.0, 1.0, 0.0]);
        let p = unit(&[1.0, 0.0, 0.0]);
        assert_eq!(loss_local(&v, &p, &[], 0.07, false).0, 0.0);
        let (l, _) = loss_local(&v, &p, &[p.clone()], 0.07, false);
        assert!((l - 2f64.ln()).abs() < 1e-9);
        let zero = vec![0.0; 3];
        let (kept, _) = loss_local(&v, &p, &[zero.clone()], 0.07, false);
        let s = cos(&v, &p) / 0.07;
        assert!((kept - (s.exp() + 1.0).ln() + s).abs() < 1e-12);
        assert_eq!(loss_local(&v, &p, &[zero], 0.07, true).0, 0.0);
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut p = CastParams::init(8, 2, 0.1, 1).unwrap();
        let before = p.flatten();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut st, &AdamW::new(1e-4, 1e-3)).unwrap();
        let factor = 1.0 - 1e-4 * 1e-3;
        for (a, b) in p.flatten().iter().zip(&before) {
            assert_eq!(*a, b * factor);
        }
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut p = LateFusionParams::zeros(2).unwrap();
        let mut g = p.zeros_like();
        g.b1 = vec![0.3, -2.0];
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut st, &AdamW::new(1e-3, 0.0)).unwrap();
        assert!((p.b1[0] + 1e-3).abs() < 1e-9);
        assert!((p.b1[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = LateFusionParams::init(4, 2).unwrap();
        let before = p.clone();
        let g = LateFusionParams::init(4, 9).unwrap();
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut st, &AdamW::new(0.0, 1e-3)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = LateFusionParams::zeros(2).unwrap();
        let g = LateFusionParams::zeros(3).unwrap();
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            adamw_step(&mut p, &g, &mut st, &AdamW::new(1e-3, 0.0)),
            Err(CvrError::ShapeMismatch { .. })
        ));
    }
}
