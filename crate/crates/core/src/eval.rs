//! Candidate scoring, ranking metrics and ensemble-weight selection.
//!
//! Every candidate `c` of a query gets up to three cosine scores:
//!
//! * `A = sim(q, c)`: semantic match with the instruction text,
//! * `B = sim(v_prev, c)`: visual continuity with the latest context clip,
//! * `C = sim(v̂, c)`: agreement with the predicted next state.
//!
//! The full ensemble ranks by `A + w_v·B + w_p·C`. Ties are broken by
//! ascending clip id so rankings are platform independent.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{LateFusionParams, Model, PredictInput};
use crate::data::{Benchmark, CandidateKind, EmbeddingStore, QueryInstance};
use crate::error::{CvrError, Result};
use crate::math::cosine_sim;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    TextOnly,
    VisOnly,
    CastOnly,
    HeuristicLateFusion { alpha: f64 },
    SemanticEnsemble,
    FullEnsemble,
    LearnedLateFusion,
}

impl ScoreMode {
    pub fn needs_predictor(self) -> bool {
        matches!(self, ScoreMode::CastOnly | ScoreMode::SemanticEnsemble | ScoreMode::FullEnsemble)
    }

    pub fn needs_context(self) -> bool {
        matches!(
            self,
            ScoreMode::VisOnly | ScoreMode::HeuristicLateFusion { .. } | ScoreMode::FullEnsemble | ScoreMode::LearnedLateFusion
        )
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreMode::TextOnly => f.write_str("text"),
            ScoreMode::VisOnly => f.write_str("vis"),
            ScoreMode::CastOnly => f.write_str("cast"),
            ScoreMode::HeuristicLateFusion { alpha } => write!(f, "late:{alpha}"),
            ScoreMode::SemanticEnsemble => f.write_str("semantic"),
            ScoreMode::FullEnsemble => f.write_str("full"),
            ScoreMode::LearnedLateFusion => f.write_str("learned-late"),
        }
    }
}

impl FromStr for ScoreMode {
    type Err = CvrError;

    /// `text`, `vis`, `cast`, `late[:alpha]`, `semantic`, `full`, `learned-late`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "text" => ScoreMode::TextOnly,
            "vis" => ScoreMode::VisOnly,
            "cast" => ScoreMode::CastOnly,
            "late" => ScoreMode::HeuristicLateFusion { alpha: 0.5 },
            "semantic" => ScoreMode::SemanticEnsemble,
            "full" => ScoreMode::FullEnsemble,
            "learned-late" => ScoreMode::LearnedLateFusion,
            other => match other.strip_prefix("late:").map(str::parse::<f64>) {
                Some(Ok(alpha)) => ScoreMode::HeuristicLateFusion { alpha },
                _ => return Err(CvrError::InvalidConfig(format!("unknown score mode `{s}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub w_v: f64,
    pub w_p: f64,
}

/// Per-candidate scores. `b` is absent without context, `c` without a
/// predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub a: f64,
    pub b: Option<f64>,
    pub c: Option<f64>,
}

/// Everything needed to score a benchmark.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub clips: &'a EmbeddingStore,
    pub texts: &'a EmbeddingStore,
    pub model: Option<&'a Model>,
    /// Context window the predictor was trained with; longer query
    /// contexts keep only their most recent clips.
    pub context_len: usize,
}

impl<'a> Scorer<'a> {
    fn late_fusion(&self) -> Result<&'a LateFusionParams> {
        match self.model {
            Some(Model::LateFusion(p)) => Ok(p),
            _ => Err(CvrError::MissingModel("learned late fusion needs a late-fusion checkpoint")),
        }
    }

    fn check_mode(&self, mode: ScoreMode) -> Result<()> {
        if mode.needs_predictor() && !matches!(self.model, Some(Model::Cast(_) | Model::EarlyFusion(_))) {
            return Err(CvrError::MissingModel("this score mode needs a next-state predictor checkpoint"));
        }
        if mode == ScoreMode::LearnedLateFusion {
            self.late_fusion()?;
        }
        Ok(())
    }

    /// Score triples for every candidate of `q`, in candidate order.
    pub fn triples(&self, q: &QueryInstance, with_prediction: bool) -> Result<Vec<ScoreTriple>> {
        let text = self.texts.require(&q.query_text_id, "text")?;
        let keep = q.context_ids.len().min(self.context_len);
        let ctx_ids = &q.context_ids[q.context_ids.len() - keep..];
        let history = ctx_ids
            .iter()
            .map(|id| self.clips.require(id, "clip").map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let prediction = match (with_prediction, self.model) {
            (true, Some(m)) => {
                let zeros = vec![0.0; self.clips.dim()];
                let anchor = history.last().map_or(zeros.as_slice(), Vec::as_slice);
                let input = PredictInput {
                    query: text,
                    anchor,
                    history: &history,
                    max_history: self.context_len,
                };
                m.predict(&input).transpose()?
            }
            _ => None,
        };
        q.candidates
            .iter()
            .map(|c| {
                let v = self.clips.require(&c.clip_id, "clip")?;
                Ok(ScoreTriple {
                    a: cosine_sim(text, v)?,
                    b: history.last().map(|p| cosine_sim(p, v)).transpose()?,
                    c: prediction.as_ref().map(|p| cosine_sim(p, v)).transpose()?,
                })
            })
            .collect()
    }
}

/// Combines one candidate's scores under `mode`.
pub fn combine(
    t: &ScoreTriple,
    mode: ScoreMode,
    weights: EnsembleWeights,
    late: Option<&LateFusionParams>,
    query_id: &str,
) -> Result<f64> {
    let missing_ctx = || CvrError::MissingContext(query_id.to_string());
    let missing_pred = || CvrError::MissingModel("this score mode needs a next-state predictor checkpoint");
    Ok(match mode {
        ScoreMode::TextOnly => t.a,
        ScoreMode::VisOnly => t.b.ok_or_else(missing_ctx)?,
        ScoreMode::CastOnly => t.c.ok_or_else(missing_pred)?,
        ScoreMode::HeuristicLateFusion { alpha } => t.a + alpha * t.b.ok_or_else(missing_ctx)?,
        ScoreMode::SemanticEnsemble => t.a + weights.w_p * t.c.ok_or_else(missing_pred)?,
        ScoreMode::FullEnsemble => {
            t.a + weights.w_v * t.b.ok_or_else(missing_ctx)? + weights.w_p * t.c.ok_or_else(missing_pred)?
        }
        ScoreMode::LearnedLateFusion => {
            let p = late.ok_or(CvrError::MissingModel("learned late fusion needs a late-fusion checkpoint"))?;
            p.score(t.a, t.b.ok_or_else(missing_ctx)?)?
        }
    })
}

/// Candidate indices in ranked order: descending score, then ascending id.
pub fn rank_order(q: &QueryInstance, scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..q.candidates.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then_with(|| q.candidates[i].clip_id.cmp(&q.candidates[j].clip_id))
    });
    order
}

/// Ranked candidates with their scores.
pub fn score_candidates(
    q: &QueryInstance,
    scorer: &Scorer<'_>,
    weights: EnsembleWeights,
    mode: ScoreMode,
) -> Result<Vec<(String, f64)>> {
    scorer.check_mode(mode)?;
    let scores = query_scores(q, scorer, weights, mode)?;
    Ok(rank_order(q, &scores)
        .into_iter()
        .map(|i| (q.candidates[i].clip_id.clone(), scores[i]))
        .collect())
}

fn query_scores(q: &QueryInstance, scorer: &Scorer<'_>, weights: EnsembleWeights, mode: ScoreMode) -> Result<Vec<f64>> {
    let late = if mode == ScoreMode::LearnedLateFusion { Some(scorer.late_fusion()?) } else { None };
    let triples = scorer.triples(q, mode.needs_predictor())?;
    triples
        .iter()
        .map(|t| combine(t, mode, weights, late, &q.query_id))
        .collect()
}

/// Top-1 outcome category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Exact,
    /// Same source video, wrong step.
    IdentConsistent,
    /// A clip from another video.
    IdentInconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    /// 1-based rank of the ground truth.
    pub gt_rank: usize,
    pub top1_clip_id: String,
    pub top1_kind: CandidateKind,
    /// Ground truth above every state negative; `None` without any.
    pub state_ok: Option<bool>,
    pub ident_ok: Option<bool>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub exact: f64,
    pub ident_consistent_state_misaligned: f64,
    pub ident_inconsistent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub weights: Option<EnsembleWeights>,
    pub n_queries: usize,
    pub acc: f64,
    pub mnr: f64,
    pub state_acc: f64,
    pub ident_acc: f64,
    /// Queries without any state negative, left out of `state_acc`.
    pub state_excluded: usize,
    pub ident_excluded: usize,
    pub breakdown: Breakdown,
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    /// Flat per-query CSV.
    pub fn records_csv(&self) -> String {
        let opt = |b: Option<bool>| b.map_or(String::new(), |b| u8::from(b).to_string());
        let mut s = String::from("query_id,gt_rank,top1_clip_id,top1_kind,state_ok,ident_ok,outcome\n");
        for r in &self.records {
            let outcome = match r.outcome {
                Outcome::Exact => "exact",
                Outcome::IdentConsistent => "ident_consistent",
                Outcome::IdentInconsistent => "ident_inconsistent",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.query_id,
                r.gt_rank,
                r.top1_clip_id,
                r.top1_kind,
                opt(r.state_ok),
                opt(r.ident_ok),
                outcome
            ));
        }
        s
    }
}

/// Metrics for one query given its candidate scores.
pub fn record_for(q: &QueryInstance, scores: &[f64]) -> Result<QueryRecord> {
    let order = rank_order(q, scores);
    let mut rank_of = vec![0usize; order.len()];
    for (r, &i) in order.iter().enumerate() {
        rank_of[i] = r + 1;
    }
    let gt = q
        .candidates
        .iter()
        .position(|c| c.kind == CandidateKind::GroundTruth)
        .ok_or_else(|| CvrError::InvalidQuery {
            query_id: q.query_id.clone(),
            reason: "no ground-truth candidate".into(),
        })?;
    let beats_all = |kind: CandidateKind| {
        let negs: Vec<usize> = (0..q.candidates.len()).filter(|&i| q.candidates[i].kind == kind).collect();
        (!negs.is_empty()).then(|| negs.iter().all(|&i| rank_of[gt] < rank_of[i]))
    };
    let top = &q.candidates[order[0]];
    let outcome = match top.kind {
        CandidateKind::GroundTruth => Outcome::Exact,
        CandidateKind::StateNeg => Outcome::IdentConsistent,
        _ => Outcome::IdentInconsistent,
    };
    Ok(QueryRecord {
        query_id: q.query_id.clone(),
        gt_rank: rank_of[gt],
        top1_clip_id: top.clip_id.clone(),
        top1_kind: top.kind,
        state_ok: beats_all(CandidateKind::StateNeg),
        ident_ok: beats_all(CandidateKind::IdentityNeg),
        outcome,
    })
}

/// Aggregates per-query records into a report.
pub fn aggregate(mode: String, weights: Option<EnsembleWeights>, records: Vec<QueryRecord>) -> EvalReport {
    let n = records.len();
    let frac = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let count = |f: &dyn Fn(&QueryRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let exact = count(&|r| r.outcome == Outcome::Exact);
    let consistent = count(&|r| r.outcome == Outcome::IdentConsistent);
    let inconsistent = count(&|r| r.outcome == Outcome::IdentInconsistent);
    let state_n = count(&|r| r.state_ok.is_some());
    let ident_n = count(&|r| r.ident_ok.is_some());
    EvalReport {
        mode,
        weights,
        n_queries: n,
        acc: frac(exact, n),
        mnr: frac(records.iter().map(|r| r.gt_rank).sum(), n),
        state_acc: frac(count(&|r| r.state_ok == Some(true)), state_n),
        ident_acc: frac(count(&|r| r.ident_ok == Some(true)), ident_n),
        state_excluded: n - state_n,
        ident_excluded: n - ident_n,
        breakdown: Breakdown {
            exact: frac(exact, n),
            ident_consistent_state_misaligned: frac(consistent, n),
            ident_inconsistent: frac(inconsistent, n),
        },
        records,
    }
}

/// Evaluates an arbitrary per-query scoring function (candidate order in,
/// one score per candidate out). Queries are scored in parallel; the
/// report lists them in benchmark order.
pub fn evaluate_with<F>(bench: &Benchmark, label: String, score: F) -> Result<EvalReport>
where
    F: Fn(&QueryInstance) -> Result<Vec<f64>> + Sync,
{
    let records = bench
        .queries
        .par_iter()
        .map(|q| record_for(q, &score(q)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(label, None, records))
}

pub fn evaluate(bench: &Benchmark, scorer: &Scorer<'_>, weights: EnsembleWeights, mode: ScoreMode) -> Result<EvalReport> {
    scorer.check_mode(mode)?;
    let mut report = evaluate_with(bench, mode.to_string(), |q| query_scores(q, scorer, weights, mode))?;
    if matches!(mode, ScoreMode::SemanticEnsemble | ScoreMode::FullEnsemble) {
        report.weights = Some(weights);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub w_v: f64,
    pub w_p: f64,
    pub acc: f64,
    pub mnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: EnsembleWeights,
    pub points: Vec<GridPoint>,
}

/// Exhaustive search over `wv_grid × wp_grid` for the ensemble weights
/// with the highest accuracy, then lowest mean rank, then smallest
/// `(w_v, w_p)`. Score triples are computed once per query.
pub fn grid_search(
    bench: &Benchmark,
    scorer: &Scorer<'_>,
    wv_grid: &[f64],
    wp_grid: &[f64],
    mode: ScoreMode,
) -> Result<GridResult> {
    if wv_grid.is_empty() || wp_grid.is_empty() {
        return Err(CvrError::EmptyGrid);
    }
    if !matches!(mode, ScoreMode::FullEnsemble | ScoreMode::SemanticEnsemble) {
        return Err(CvrError::InvalidConfig(format!("grid search applies to ensembles, not `{mode}`")));
    }
    scorer.check_mode(mode)?;
    let triples = bench
        .queries
        .par_iter()
        .map(|q| scorer.triples(q, true))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(wv_grid.len() * wp_grid.len());
    for &w_v in wv_grid {
        for &w_p in wp_grid {
            let w = EnsembleWeights { w_v, w_p };
            let records = bench
                .queries
                .par_iter()
                .zip(triples.par_iter())
                .map(|(q, ts)| {
                    let scores = ts
                        .iter()
                        .map(|t| combine(t, mode, w, None, &q.query_id))
                        .collect::<Result<Vec<_>>>()?;
                    record_for(q, &scores)
                })
                .collect::<Result<Vec<_>>>()?;
            let r = aggregate(String::new(), None, records);
            points.push(GridPoint {
                w_v,
                w_p,
                acc: r.acc,
                mnr: r.mnr,
            });
        }
    }
    let best = points
        .iter()
        .min_by(|x, y| {
            y.acc
                .total_cmp(&x.acc)
                .then(x.mnr.total_cmp(&y.mnr))
                .then(x.w_v.total_cmp(&y.w_v))
                .then(x.w_p.total_cmp(&y.w_p))
        })
        .map(|p| EnsembleWeights { w_v: p.w_v, w_p: p.w_p })
        .ok_or(CvrError::EmptyGrid)?;
    Ok(GridResult { best, points })
}
