//! End-to-end experiment plumbing shared by the command line and the
//! acceptance tests: split, mine, train, select ensemble weights, evaluate.

use serde::{Deserialize, Serialize};

use crate::adapter::{CastParams, EarlyFusionParams, LateFusionParams, Model, ModelKind};
use crate::bench::{build_training_skeletons, mine_benchmark, split_by_video, MiningReport, MiningRules, PoolSpec};
use crate::data::{AnnotationSet, Benchmark, EmbeddingStore, RunConfig};
use crate::error::{CvrError, Result};
use crate::eval::{evaluate, grid_search, EnsembleWeights, EvalReport, GridResult, ScoreMode, Scorer};
use crate::seed;
use crate::train::{materialize, train_late_fusion, train_predictor, EpochLoss, TrainSettings, TrainingInstance};

/// Hidden width of the late-fusion scorer.
pub const LATE_FUSION_HIDDEN: usize = 8;

pub fn mining_rules(cfg: &RunConfig, base: MiningRules) -> MiningRules {
    MiningRules { seed: cfg.seed, ..base }
}

pub fn pool_spec(cfg: &RunConfig) -> PoolSpec {
    PoolSpec {
        context_len: cfg.context_len,
        pool_size: cfg.pool_size,
        max_state_negs: cfg.max_state_negs,
        max_ident_negs: cfg.max_ident_negs,
    }
}

/// Video-disjoint partitions. `fit ∪ val` is the training portion; `val`
/// only selects ensemble weights; `eval` is reported.
#[derive(Debug, Clone)]
pub struct Splits {
    pub fit: AnnotationSet,
    pub val: AnnotationSet,
    pub eval: AnnotationSet,
}

/// The train/eval split uses `train_frac` and the run seed; the fit/val
/// split of the training portion uses `fit_frac` and a derived seed.
pub fn split(ann: &AnnotationSet, train_frac: f64, cfg: &RunConfig) -> Result<Splits> {
    let (train, eval) = split_by_video(ann, train_frac, cfg.seed)?;
    let (fit, val) = split_by_video(&train, cfg.fit_frac, seed::derive(cfg.seed, &[seed::fnv1a(b"fit")]))?;
    Ok(Splits { fit, val, eval })
}

fn video_ids(ann: &AnnotationSet) -> std::collections::HashSet<String> {
    ann.videos.iter().map(|v| v.video_id.clone()).collect()
}

/// Benchmarks restricted to the validation and evaluation videos.
#[derive(Debug, Clone)]
pub struct Benchmarks {
    pub val: Benchmark,
    pub eval: Benchmark,
    pub report: MiningReport,
}

/// Mines the benchmark over every video, then keeps the queries whose
/// source video falls in each split. Negatives may come from any video.
pub fn mine_split_benchmarks(
    ann: &AnnotationSet,
    splits: &Splits,
    captions: Option<&EmbeddingStore>,
    rules: &MiningRules,
    cfg: &RunConfig,
    workers: usize,
) -> Result<Benchmarks> {
    let (full, report) = mine_benchmark(ann, captions, rules, &pool_spec(cfg), workers)?;
    Ok(Benchmarks {
        val: full.restrict_to_videos(&video_ids(&splits.val)),
        eval: full.restrict_to_videos(&video_ids(&splits.eval)),
        report,
    })
}

/// Training instances from the fit videos, with context up to `context_len`.
pub fn training_instances(
    fit: &AnnotationSet,
    clips: &EmbeddingStore,
    texts: &EmbeddingStore,
    captions: Option<&EmbeddingStore>,
    rules: &MiningRules,
    cfg: &RunConfig,
    workers: usize,
) -> Result<Vec<TrainingInstance>> {
    let caps = (cfg.max_state_negs, cfg.max_ident_negs);
    let skeletons = build_training_skeletons(fit, captions, rules, cfg.context_len, caps, workers)?;
    materialize(&skeletons, clips, texts, cfg.context_len, caps)
}

/// Initializes and trains one model kind.
pub fn train_model(
    kind: ModelKind,
    d: usize,
    data: &[TrainingInstance],
    cfg: &RunConfig,
    workers: usize,
) -> Result<(Model, Vec<EpochLoss>)> {
    if data.is_empty() {
        return Err(CvrError::InvalidConfig("no training instances".into()));
    }
    let settings = TrainSettings::from(cfg);
    seed::with_workers(workers, || match kind {
        ModelKind::Cast => {
            let init = CastParams::init(d, cfg.n_heads, cfg.dropout_rate, cfg.seed)?;
            let out = train_predictor(init, data, &settings)?;
            Ok((Model::Cast(out.params), out.curve))
        }
        ModelKind::EarlyFusionDirect | ModelKind::EarlyFusionResidual => {
            let residual = kind == ModelKind::EarlyFusionResidual;
            let init = EarlyFusionParams::init(d, 2 * d, residual, cfg.seed)?;
            let out = train_predictor(init, data, &settings)?;
            Ok((Model::EarlyFusion(out.params), out.curve))
        }
        ModelKind::LateFusion => {
            let init = LateFusionParams::init(LATE_FUSION_HIDDEN, cfg.seed)?;
            let out = train_late_fusion(init, data, &settings)?;
            Ok((Model::LateFusion(out.params), out.curve))
        }
    })
}

/// Grid search on the validation benchmark. Ensembles without context
/// (`L = 0`) fall back to the semantic ensemble with `w_v` fixed at 0.
pub fn select_weights(val: &Benchmark, scorer: &Scorer<'_>, cfg: &RunConfig, workers: usize) -> Result<(ScoreMode, GridResult)> {
    let mode = ensemble_mode(scorer.context_len);
    let wv: &[f64] = if mode == ScoreMode::SemanticEnsemble { &[0.0] } else { &cfg.wv_grid };
    let result = seed::with_workers(workers, || grid_search(val, scorer, wv, &cfg.wp_grid, mode))?;
    Ok((mode, result))
}

pub fn ensemble_mode(context_len: usize) -> ScoreMode {
    if context_len == 0 {
        ScoreMode::SemanticEnsemble
    } else {
        ScoreMode::FullEnsemble
    }
}

pub fn evaluate_on(
    bench: &Benchmark,
    scorer: &Scorer<'_>,
    weights: EnsembleWeights,
    mode: ScoreMode,
    workers: usize,
) -> Result<EvalReport> {
    seed::with_workers(workers, || evaluate(bench, scorer, weights, mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub context_len: usize,
    pub mode: String,
    pub acc: f64,
    pub mnr: f64,
    pub state_acc: f64,
    pub ident_acc: f64,
    pub cast_only_acc: f64,
    pub w_v: f64,
    pub w_p: f64,
    pub final_loss: f64,
}

/// Stores shared by every stage of an experiment.
#[derive(Debug, Clone, Copy)]
pub struct Stores<'a> {
    pub clips: &'a EmbeddingStore,
    pub texts: &'a EmbeddingStore,
    pub captions: Option<&'a EmbeddingStore>,
}

/// Retrains CAST for every context length and evaluates it with weights
/// selected on the validation benchmark. The benchmarks are mined once
/// with the largest window and truncated per row, so candidate pools are
/// identical across rows.
pub fn context_sweep(
    splits: &Splits,
    benches: &Benchmarks,
    stores: Stores<'_>,
    rules: &MiningRules,
    cfg: &RunConfig,
    lengths: &[usize],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let d = stores.clips.dim();
    let mut rows = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let cfg_l = RunConfig { context_len: l, ..cfg.clone() };
        let data = training_instances(&splits.fit, stores.clips, stores.texts, stores.captions, rules, &cfg_l, workers)?;
        let (model, curve) = train_model(ModelKind::Cast, d, &data, &cfg_l, workers)?;
        let scorer = Scorer {
            clips: stores.clips,
            texts: stores.texts,
            model: Some(&model),
            context_len: l,
        };
        let val = benches.val.with_context_limit(l);
        let eval = benches.eval.with_context_limit(l);
        let (mode, grid) = select_weights(&val, &scorer, &cfg_l, workers)?;
        let report = evaluate_on(&eval, &scorer, grid.best, mode, workers)?;
        let cast_only = evaluate_on(&eval, &scorer, grid.best, ScoreMode::CastOnly, workers)?;
        rows.push(SweepRow {
            context_len: l,
            mode: mode.to_string(),
            acc: report.acc,
            mnr: report.mnr,
            state_acc: report.state_acc,
            ident_acc: report.ident_acc,
            cast_only_acc: cast_only.acc,
            w_v: grid.best.w_v,
            w_p: grid.best.w_p,
            final_loss: curve.last().map_or(f64::NAN, |e| e.mean_loss),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("L,mode,acc,mnr,state_acc,ident_acc,cast_only_acc,w_v,w_p,final_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.context_len, r.mode, r.acc, r.mnr, r.state_acc, r.ident_acc, r.cast_only_acc, r.w_v, r.w_p, r.final_loss
        ));
    }
    s
}
