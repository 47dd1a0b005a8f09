//! Finite-difference checks of every backward pass. Each check returns
//! `(label, max relative error)` rows so that callers can assert on them or
//! summarize them.

use super::*;
use cvr_core::adapter::{
    CastParams, CastTape, EarlyFusionParams, EarlyFusionTape, LateFusionParams, Parameters, PredictInput, Predictor,
};
use cvr_core::math::{
    cosine_sim, cosine_sim_bwd, dropout_bwd, dropout_fwd, l2_normalize, l2_normalize_bwd, layer_norm_bwd, layer_norm_fwd,
    linear_bwd, linear_fwd, norm, relu_bwd, relu_fwd, softmax_bwd, stable_softmax, Matrix,
};
use cvr_core::train::{loss_batch, loss_local, loss_total, LossWeights, TrainingInstance};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DIMS: [usize; 3] = [4, 8, 16];
/// Longest history exercised, equal to the default context window.
pub const L: usize = 5;

pub type Rows = Vec<(String, f64)>;

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, random_vec(r, rows * cols)).unwrap()
}

pub fn linear() -> Rows {
    let mut out = Rows::new();
    for (i, &d) in DIMS.iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let (n_out, n_in) = (d, d + 3);
        let x = random_vec(&mut r, n_in);
        let w = random_matrix(&mut r, n_out, n_in);
        let b = random_vec(&mut r, n_out);
        let g = random_vec(&mut r, n_out);
        let an = linear_bwd(&x, &w, &g).unwrap();
        let f = |x: &[f64], w: &Matrix, b: &[f64]| dot(&g, &linear_fwd(x, w, b).unwrap());
        out.push((format!("linear x d={d}"), max_rel_err(&an.x, &numeric_grad(&x, |x| f(x, &w, &b)))));
        let nw = numeric_grad(&w.data, |wd| f(&x, &Matrix::from_vec(n_out, n_in, wd.to_vec()).unwrap(), &b));
        out.push((format!("linear W d={d}"), max_rel_err(&an.w.data, &nw)));
        out.push((format!("linear b d={d}"), max_rel_err(&an.b, &numeric_grad(&b, |b| f(&x, &w, b)))));
    }
    out
}

pub fn layer_norm() -> Rows {
    let mut out = Rows::new();
    for (i, &d) in DIMS.iter().enumerate() {
        let mut r = rng(200 + i as u64);
        let x = random_vec(&mut r, d);
        let gamma = random_vec(&mut r, d);
        let beta = random_vec(&mut r, d);
        let g = random_vec(&mut r, d);
        let (_, cache) = layer_norm_fwd(&x, &gamma, &beta).unwrap();
        let (gx, ggamma, gbeta) = layer_norm_bwd(&cache, &gamma, &g);
        let f = |x: &[f64], ga: &[f64], be: &[f64]| dot(&g, &layer_norm_fwd(x, ga, be).unwrap().0);
        out.push((format!("layer norm x d={d}"), max_rel_err(&gx, &numeric_grad(&x, |x| f(x, &gamma, &beta)))));
        out.push((format!("layer norm gain d={d}"), max_rel_err(&ggamma, &numeric_grad(&gamma, |ga| f(&x, ga, &beta)))));
        out.push((format!("layer norm shift d={d}"), max_rel_err(&gbeta, &numeric_grad(&beta, |be| f(&x, &gamma, be)))));
    }
    out
}

/// Also asserts that masked positions carry exactly zero probability and
/// zero gradient.
pub fn masked_softmax() -> Rows {
    let mut out = Rows::new();
    for (i, &d) in DIMS.iter().enumerate() {
        let mut r = rng(300 + i as u64);
        let logits: Vec<f64> = random_vec(&mut r, d).iter().map(|x| 3.0 * x).collect();
        let masked: Vec<bool> = (0..d).map(|j| j < d / 2 - 1).collect();
        let g = random_vec(&mut r, d);
        let p = stable_softmax(&logits, &masked).unwrap();
        let an = softmax_bwd(&p, &g);
        let num = numeric_grad(&logits, |l| dot(&g, &stable_softmax(l, &masked).unwrap()));
        for j in (0..d).filter(|&j| masked[j]) {
            assert_eq!(p[j], 0.0);
            assert_eq!(an[j], 0.0);
        }
        out.push((format!("masked softmax d={d}"), max_rel_err(&an, &num)));
    }
    out
}

pub fn normalize_and_cosine() -> Rows {
    let mut out = Rows::new();
    for (i, &d) in DIMS.iter().enumerate() {
        let mut r = rng(400 + i as u64);
        let x = random_vec(&mut r, d);
        let other = random_vec(&mut r, d);
        let g = random_vec(&mut r, d);
        let y = l2_normalize(&x).unwrap();
        let an = l2_normalize_bwd(&y, norm(&x), &g);
        let num = numeric_grad(&x, |x| dot(&g, &l2_normalize(x).unwrap()));
        out.push((format!("l2 normalize d={d}"), max_rel_err(&an, &num)));
        let an = cosine_sim_bwd(&x, &other, 0.7);
        let num = numeric_grad(&x, |x| 0.7 * cosine_sim(x, &other).unwrap());
        out.push((format!("cosine d={d}"), max_rel_err(&an, &num)));
    }
    out
}

pub fn relu_and_dropout() -> Rows {
    let mut out = Rows::new();
    for (i, &d) in DIMS.iter().enumerate() {
        let mut r = rng(500 + i as u64);
        let x: Vec<f64> = random_vec(&mut r, d)
            .into_iter()
            .map(|v| if v.abs() < KINK_MARGIN { 0.5 } else { v })
            .collect();
        let g = random_vec(&mut r, d);
        let num = numeric_grad(&x, |x| dot(&g, &relu_fwd(x)));
        out.push((format!("relu d={d}"), max_rel_err(&relu_bwd(&x, &g), &num)));
        let (_, mask) = dropout_fwd(&x, 0.3, &mut rng(9));
        let apply = |x: &[f64]| x.iter().zip(&mask).map(|(a, m)| a * m).collect::<Vec<_>>();
        let num = numeric_grad(&x, |x| dot(&g, &apply(x)));
        out.push((format!("dropout d={d}"), max_rel_err(&dropout_bwd(&mask, &g), &num)));
    }
    out
}

/// Random parameters with nonzero biases and layer-norm shifts, so every
/// term of the backward pass is exercised.
pub fn perturbed<P: Parameters>(mut p: P, seed: u64) -> P {
    let mut r = rng(seed ^ 0xabcd);
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.1 * r.random_range(-1.0..1.0);
        }
    }
    p
}

pub fn heads_for(d: usize) -> usize {
    match d {
        4 => 2,
        8 => 4,
        _ => 8,
    }
}

/// Parameter gradients of `g · predict(input)` over dims and history
/// lengths `{0, 1, L}`. Instances whose ReLU inputs sit near the kink are
/// resampled.
fn predictor_rows<P: Predictor>(name: &str, make: impl Fn(usize, u64) -> P, margin: impl Fn(&P::Tape) -> f64) -> Rows {
    let mut out = Rows::new();
    for &d in &DIMS {
        for hist in [0, 1, L] {
            let mut attempt = 0u64;
            loop {
                let seed = 1000 * d as u64 + 10 * hist as u64 + attempt;
                let p = make(d, seed);
                let mut r = rng(seed);
                let q = random_unit(&mut r, d);
                let anchor = random_unit(&mut r, d);
                let history: Vec<Vec<f64>> = (0..hist).map(|_| random_unit(&mut r, d)).collect();
                let g = random_vec(&mut r, d);
                let input = PredictInput {
                    query: &q,
                    anchor: &anchor,
                    history: &history,
                    max_history: L,
                };
                let (_, tape) = p.forward(&input, None).unwrap();
                if margin(&tape) < KINK_MARGIN {
                    attempt += 1;
                    assert!(attempt < 50, "{name}: no kink-free instance");
                    continue;
                }
                let an = p.backward(&tape, &g).unwrap().flatten();
                let num = numeric_param_grad(&p, |p| dot(&g, &p.predict(&input).unwrap()));
                out.push((format!("{name} d={d} history={hist}"), max_rel_err(&an, &num)));
                break;
            }
        }
    }
    out
}

pub fn cast() -> Rows {
    predictor_rows(
        "cast",
        |d, s| perturbed(CastParams::init(d, heads_for(d), 0.1, s).unwrap(), s),
        CastTape::relu_margin,
    )
}

pub fn early_fusion(residual: bool) -> Rows {
    let name = if residual { "early fusion residual" } else { "early fusion direct" };
    predictor_rows(
        name,
        |d, s| perturbed(EarlyFusionParams::init(d, 2 * d, residual, s).unwrap(), s),
        EarlyFusionTape::relu_margin,
    )
}

pub fn late_fusion() -> Rows {
    let mut out = Rows::new();
    for seed in 0..20u64 {
        let p = perturbed(LateFusionParams::init(8, seed).unwrap(), seed);
        let mut r = rng(seed);
        let (a, b) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let (_, tape) = p.forward(a, b).unwrap();
        if tape.relu_margin() < KINK_MARGIN {
            continue;
        }
        let an = p.backward(&tape, 1.3).unwrap().flatten();
        let num = numeric_param_grad(&p, |p| 1.3 * p.score(a, b).unwrap());
        out.push((format!("late fusion seed={seed}"), max_rel_err(&an, &num)));
    }
    assert!(out.len() >= 10, "too few kink-free late fusion instances");
    out
}

pub fn batch_loss() -> Rows {
    let mut r = rng(600);
    let (b, d) = (4, 8);
    let v_hats: Vec<Vec<f64>> = (0..b).map(|_| random_unit(&mut r, d)).collect();
    let pos: Vec<Vec<f64>> = (0..b).map(|_| random_unit(&mut r, d)).collect();
    let (_, grads) = loss_batch(&v_hats, &pos, 0.07).unwrap();
    (0..b)
        .map(|i| {
            let num = numeric_grad(&v_hats[i], |v| {
                let mut vs = v_hats.clone();
                vs[i] = v.to_vec();
                loss_batch(&vs, &pos, 0.07).unwrap().0
            });
            (format!("batch loss row={i}"), max_rel_err(&grads[i], &num))
        })
        .collect()
}

pub fn local_loss() -> Rows {
    let mut r = rng(700);
    let d = 8;
    let v = random_unit(&mut r, d);
    let pos = random_unit(&mut r, d);
    let negs = vec![random_unit(&mut r, d), vec![0.0; d], random_unit(&mut r, d)];
    [false, true]
        .into_iter()
        .map(|drop| {
            let (_, an) = loss_local(&v, &pos, &negs, 0.07, drop);
            let num = numeric_grad(&v, |v| loss_local(v, &pos, &negs, 0.07, drop).0);
            (format!("local loss drop_zero={drop}"), max_rel_err(&an, &num))
        })
        .collect()
}

pub fn random_instance(r: &mut ChaCha8Rng, d: usize, id: usize) -> TrainingInstance {
    let mut state_negs = vec![random_unit(r, d), random_unit(r, d)];
    state_negs.push(vec![0.0; d]);
    TrainingInstance {
        query_id: format!("q{id}"),
        query: random_unit(r, d),
        anchor: random_unit(r, d),
        history: vec![random_unit(r, d), random_unit(r, d)],
        pos: random_unit(r, d),
        state_negs,
        ident_negs: vec![random_unit(r, d), random_unit(r, d), random_unit(r, d)],
        state_valid: vec![true, true, false],
        ident_valid: vec![true; 3],
    }
}

/// The weighted total loss differentiated end to end through CAST.
pub fn total_loss_through_cast() -> Rows {
    let d = 8;
    let mut r = rng(800);
    let batch: Vec<TrainingInstance> = (0..3).map(|i| random_instance(&mut r, d, i)).collect();
    let refs: Vec<&TrainingInstance> = batch.iter().collect();
    let w = LossWeights {
        tau: 0.07,
        lambda_s: 5.0,
        lambda_i: 1.0,
        drop_zero_negatives: false,
    };
    let mut seed = 0;
    let p = loop {
        let p = perturbed(CastParams::init(d, 4, 0.1, seed).unwrap(), seed);
        let ok = batch
            .iter()
            .all(|x| p.forward(&x.input(L), None).unwrap().1.relu_margin() >= KINK_MARGIN);
        if ok {
            break p;
        }
        seed += 1;
    };
    let total = |p: &CastParams| {
        let v: Vec<Vec<f64>> = batch.iter().map(|x| p.predict(&x.input(L)).unwrap()).collect();
        loss_total(&v, &refs, &w).unwrap().0.total
    };
    let fwd: Vec<_> = batch.iter().map(|x| p.forward(&x.input(L), None).unwrap()).collect();
    let v_hats: Vec<Vec<f64>> = fwd.iter().map(|(v, _)| v.clone()).collect();
    let (_, grads) = loss_total(&v_hats, &refs, &w).unwrap();
    let mut an = p.zeros_like();
    for ((_, tape), g) in fwd.iter().zip(&grads) {
        an.add_assign(&p.backward(tape, g).unwrap());
    }
    vec![("total loss through cast".into(), max_rel_err(&an.flatten(), &numeric_param_grad(&p, total)))]
}

pub fn all() -> Rows {
    [
        linear(),
        layer_norm(),
        masked_softmax(),
        normalize_and_cosine(),
        relu_and_dropout(),
        cast(),
        early_fusion(false),
        early_fusion(true),
        late_fusion(),
        batch_loss(),
        local_loss(),
        total_loss_through_cast(),
    ]
    .concat()
}

#[track_caller]
pub fn assert_rows(rows: &Rows) {
    for (label, err) in rows {
        assert!(*err < TOL, "{label}: max relative error {err:.3e} >= {TOL:e}");
    }
}
