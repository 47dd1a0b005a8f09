//! Benchmark construction: sliding-window queries, typed hard-negative
//! mining, cross-pool backfill and fixed-size candidate pools.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, Benchmark, Candidate, CandidateKind, EmbeddingStore, QueryInstance, StepRecord};
use crate::error::{CvrError, Result};
use crate::math::cosine_sim;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdentityStrategy {
    /// Top-k cross-video clips by caption-embedding cosine similarity.
    CaptionKnn,
    /// Same task and same step, different video.
    TaskStepMatch,
    /// As `TaskStepMatch`, topped up with same-task clips at other steps
    /// when the strict pool runs short.
    TaskStepFallback,
    /// Token-set Jaccard over caption text. A convenience for datasets
    /// without caption embeddings.
    LexicalJaccard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EasyStrategy {
    DiffVideo,
    DiffTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningRules {
    pub identity_strategy: IdentityStrategy,
    pub easy_strategy: EasyStrategy,
    pub avoid_immediate_predecessor: bool,
    pub seed: u64,
}

impl Default for MiningRules {
    fn default() -> Self {
        MiningRules {
            identity_strategy: IdentityStrategy::CaptionKnn,
            easy_strategy: EasyStrategy::DiffVideo,
            avoid_immediate_predecessor: true,
            seed: 42,
        }
    }
}

/// A query before its candidate pool exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySkeleton {
    pub query_id: String,
    /// Index of the source video in the annotation set.
    pub video: usize,
    /// Position of the target step inside the video.
    pub step: usize,
    pub source_video_id: String,
    pub gt_clip_id: String,
    pub context_ids: Vec<String>,
}

/// One query per step that has a predecessor; the context holds up to
/// `context_len` immediately preceding clips, most recent last.
pub fn build_queries(ann: &AnnotationSet, context_len: usize) -> Vec<QuerySkeleton> {
    let mut out = Vec::new();
    for (vi, video) in ann.videos.iter().enumerate() {
        for t in 1..video.steps.len() {
            let start = t.saturating_sub(context_len);
            out.push(QuerySkeleton {
                query_id: video.steps[t].clip_id.clone(),
                video: vi,
                step: t,
                source_video_id: video.video_id.clone(),
                gt_clip_id: video.steps[t].clip_id.clone(),
                context_ids: video.steps[start..t].iter().map(|s| s.clip_id.clone()).collect(),
            });
        }
    }
    out
}

/// Up to `k` clips from the source video other than the target, ordered by
/// preference: past and future steps alternate, and the immediate
/// predecessor comes last when `avoid_immediate_predecessor` is set.
pub fn mine_state_negatives<R: Rng + ?Sized>(
    ann: &AnnotationSet,
    query: &QuerySkeleton,
    k: usize,
    rules: &MiningRules,
    rng: &mut R,
) -> Vec<String> {
    let steps = &ann.videos[query.video].steps;
    let t = query.step;
    let mut past: Vec<usize> = (0..t).collect();
    let mut held_back = Vec::new();
    if rules.avoid_immediate_predecessor && t > 0 {
        past.pop();
        held_back.push(t - 1);
    }
    let mut future: Vec<usize> = (t + 1..steps.len()).collect();
    past.shuffle(rng);
    future.shuffle(rng);

    let mut order = Vec::with_capacity(steps.len());
    let (mut p, mut f) = (past.into_iter(), future.into_iter());
    loop {
        match (p.next(), f.next()) {
            (None, None) => break,
            (a, b) => order.extend(a.into_iter().chain(b)),
        }
    }
    order.extend(held_back);
    order.truncate(k);
    order.into_iter().map(|i| steps[i].clip_id.clone()).collect()
}

fn step_matches(a: &StepRecord, b: &StepRecord) -> bool {
    match (&a.task_step_label, &b.task_step_label) {
        (Some(x), Some(y)) => x == y,
        _ => a.step_index == b.step_index,
    }
}

fn tokens(caption: &str) -> HashSet<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Sorts `(score, clip_id)` by descending score, ascending id, and keeps `k` ids.
fn top_k(mut scored: Vec<(f64, String)>, k: usize) -> Vec<String> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Up to `k` clips from videos other than the source video, chosen by the
/// configured identity strategy.
pub fn mine_identity_negatives<R: Rng + ?Sized>(
    ann: &AnnotationSet,
    query: &QuerySkeleton,
    k: usize,
    rules: &MiningRules,
    captions: Option<&EmbeddingStore>,
    rng: &mut R,
) -> Result<Vec<String>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let source = &ann.videos[query.video];
    let target = &source.steps[query.step];
    let others = ann.videos.iter().enumerate().filter(|(vi, _)| *vi != query.video);

    match rules.identity_strategy {
        IdentityStrategy::CaptionKnn => {
            let store = captions.ok_or_else(|| CvrError::MissingCaptionEmbedding(target.clip_id.clone()))?;
            let anchor = store
                .get(&target.clip_id)
                .ok_or_else(|| CvrError::MissingCaptionEmbedding(target.clip_id.clone()))?;
            let mut scored = Vec::new();
            for (_, v) in others {
                for s in &v.steps {
                    let emb = store
                        .get(&s.clip_id)
                        .ok_or_else(|| CvrError::MissingCaptionEmbedding(s.clip_id.clone()))?;
                    scored.push((cosine_sim(anchor, emb)?, s.clip_id.clone()));
                }
            }
            Ok(top_k(scored, k))
        }
        IdentityStrategy::LexicalJaccard => {
            let anchor = tokens(&target.caption);
            let scored = others
                .flat_map(|(_, v)| v.steps.iter())
                .map(|s| (jaccard(&anchor, &tokens(&s.caption)), s.clip_id.clone()))
                .filter(|(j, _)| *j > 0.0)
                .collect();
            Ok(top_k(scored, k))
        }
        IdentityStrategy::TaskStepMatch | IdentityStrategy::TaskStepFallback => {
            let mut strict = Vec::new();
            let mut relaxed = Vec::new();
            for (_, v) in others.filter(|(_, v)| v.task_id == source.task_id) {
                for s in &v.steps {
                    if step_matches(s, target) {
                        strict.push(s.clip_id.clone());
                    } else {
                        relaxed.push(s.clip_id.clone());
                    }
                }
            }
            strict.shuffle(rng);
            if rules.identity_strategy == IdentityStrategy::TaskStepFallback && strict.len() < k {
                relaxed.shuffle(rng);
                strict.extend(relaxed);
            }
            strict.truncate(k);
            Ok(strict)
        }
    }
}

/// Clips eligible as easy negatives for `query`, in annotation order.
pub fn easy_pool(ann: &AnnotationSet, query: &QuerySkeleton, rules: &MiningRules) -> Vec<String> {
    let source = &ann.videos[query.video];
    ann.videos
        .iter()
        .enumerate()
        .filter(|(vi, v)| match rules.easy_strategy {
            EasyStrategy::DiffVideo => *vi != query.video,
            EasyStrategy::DiffTask => v.task_id != source.task_id,
        })
        .flat_map(|(_, v)| v.steps.iter().map(|s| s.clip_id.clone()))
        .collect()
}

/// Hard-negative slots after backfill. `state_slots` may hold identity
/// clips and vice versa; `from_state` records provenance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HardSlots {
    pub state_slots: Vec<String>,
    pub ident_slots: Vec<String>,
    pub from_state: HashSet<String>,
}

impl HardSlots {
    pub fn backfilled(&self) -> (usize, usize) {
        let into_state = self.state_slots.iter().filter(|c| !self.from_state.contains(*c)).count();
        let into_ident = self.ident_slots.iter().filter(|c| self.from_state.contains(*c)).count();
        (into_state, into_ident)
    }
}

/// Takes up to `caps.0` state and `caps.1` identity clips; a shortfall in
/// one type is backfilled from the unused remainder of the other.
pub fn fill_hard_slots(state: &[String], ident: &[String], caps: (usize, usize)) -> HardSlots {
    let mut seen = HashSet::new();
    let state: Vec<&String> = state.iter().filter(|c| seen.insert(c.as_str())).collect();
    let ident: Vec<&String> = ident.iter().filter(|c| seen.insert(c.as_str())).collect();

    let take_s = caps.0.min(state.len());
    let take_i = caps.1.min(ident.len());
    let extra_i = (caps.0 - take_s).min(ident.len() - take_i);
    let extra_s = (caps.1 - take_i).min(state.len() - take_s);

    let mut slots = HardSlots::default();
    slots.state_slots.extend(state[..take_s].iter().map(|c| (*c).clone()));
    slots.state_slots.extend(ident[take_i..take_i + extra_i].iter().map(|c| (*c).clone()));
    slots.ident_slots.extend(ident[..take_i].iter().map(|c| (*c).clone()));
    slots.ident_slots.extend(state[take_s..take_s + extra_s].iter().map(|c| (*c).clone()));
    slots.from_state = state[..take_s + extra_s].iter().map(|c| (*c).clone()).collect();
    slots
}

/// Builds the shuffled candidate pool: ground truth, up to `caps` hard
/// negatives with cross-pool backfill, then easy negatives to reach
/// `pool_size`. Backfilled clips keep the kind of the pool they came from.
pub fn assemble_pool<R: Rng + ?Sized>(
    query: &QuerySkeleton,
    state_negs: &[String],
    ident_negs: &[String],
    easy: &[String],
    caps: (usize, usize),
    pool_size: usize,
    rng: &mut R,
) -> Result<QueryInstance> {
    let slots_total = pool_size.saturating_sub(1);
    let clean = |v: &[String]| -> Vec<String> {
        v.iter()
            .filter(|c| **c != query.gt_clip_id)
            .cloned()
            .collect()
    };
    let hard = fill_hard_slots(&clean(state_negs), &clean(ident_negs), caps);

    let mut candidates = vec![Candidate {
        clip_id: query.gt_clip_id.clone(),
        kind: CandidateKind::GroundTruth,
    }];
    let mut used: HashSet<String> = HashSet::from([query.gt_clip_id.clone()]);
    for id in hard.state_slots.iter().chain(&hard.ident_slots) {
        if candidates.len() > slots_total {
            break;
        }
        if used.insert(id.clone()) {
            let kind = if hard.from_state.contains(id) {
                CandidateKind::StateNeg
            } else {
                CandidateKind::IdentityNeg
            };
            candidates.push(Candidate { clip_id: id.clone(), kind });
        }
    }

    let need = pool_size - candidates.len();
    let easy: Vec<&String> = easy.iter().filter(|c| !used.contains(*c)).collect();
    let easy: Vec<&String> = {
        let mut seen = HashSet::new();
        easy.into_iter().filter(|c| seen.insert(c.as_str())).collect()
    };
    if easy.len() < need {
        return Err(CvrError::InsufficientCandidates {
            query_id: query.query_id.clone(),
            needed: pool_size,
            available: candidates.len() + easy.len(),
        });
    }
    for i in rand::seq::index::sample(rng, easy.len(), need) {
        candidates.push(Candidate {
            clip_id: easy[i].clone(),
            kind: CandidateKind::EasyNeg,
        });
    }
    candidates.shuffle(rng);

    Ok(QueryInstance {
        query_id: query.query_id.clone(),
        query_text_id: query.gt_clip_id.clone(),
        source_video_id: query.source_video_id.clone(),
        gt_clip_id: query.gt_clip_id.clone(),
        context_ids: query.context_ids.clone(),
        candidates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub context_len: usize,
    pub pool_size: usize,
    pub max_state_negs: usize,
    pub max_ident_negs: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            context_len: 5,
            pool_size: 10,
            max_state_negs: 3,
            max_ident_negs: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub queries: usize,
    pub kind_counts: BTreeMap<String, usize>,
    /// Identity clips placed in state slots.
    pub backfilled_into_state: usize,
    /// State clips placed in identity slots.
    pub backfilled_into_ident: usize,
    pub queries_with_backfill: usize,
    /// Queries with fewer than the capped number of hard negatives.
    pub queries_with_extra_easy: usize,
    /// Queries dropped because even the easy pool could not fill them.
    pub dropped_insufficient: Vec<String>,
}

fn mine_one(
    ann: &AnnotationSet,
    q: &QuerySkeleton,
    rules: &MiningRules,
    spec: &PoolSpec,
    captions: Option<&EmbeddingStore>,
) -> Result<(QueryInstance, (usize, usize))> {
    let mut rng = seed::stream(rules.seed, &q.query_id);
    let depth = spec.pool_size.saturating_sub(1);
    let state = mine_state_negatives(ann, q, depth, rules, &mut rng);
    let ident = mine_identity_negatives(ann, q, depth, rules, captions, &mut rng)?;
    let easy = easy_pool(ann, q, rules);
    let backfill = fill_hard_slots(&state, &ident, (spec.max_state_negs, spec.max_ident_negs)).backfilled();
    let inst = assemble_pool(
        q,
        &state,
        &ident,
        &easy,
        (spec.max_state_negs, spec.max_ident_negs),
        spec.pool_size,
        &mut rng,
    )?;
    Ok((inst, backfill))
}

/// Mines the whole benchmark. Each query draws from its own stream derived
/// from `(rules.seed, query_id)`, so the output does not depend on `workers`.
pub fn mine_benchmark(
    ann: &AnnotationSet,
    captions: Option<&EmbeddingStore>,
    rules: &MiningRules,
    spec: &PoolSpec,
    workers: usize,
) -> Result<(Benchmark, MiningReport)> {
    ann.check_structure()?;
    let skeletons = build_queries(ann, spec.context_len);
    let results: Vec<Result<(QueryInstance, (usize, usize))>> = seed::with_workers(workers, || {
        skeletons
            .par_iter()
            .map(|q| mine_one(ann, q, rules, spec, captions))
            .collect()
    });

    let mut report = MiningReport::default();
    let mut queries = Vec::with_capacity(results.len());
    for (q, r) in skeletons.iter().zip(results) {
        match r {
            Ok((inst, (into_s, into_i))) => {
                for c in &inst.candidates {
                    *report.kind_counts.entry(c.kind.to_string()).or_default() += 1;
                }
                report.backfilled_into_state += into_s;
                report.backfilled_into_ident += into_i;
                if into_s + into_i > 0 {
                    report.queries_with_backfill += 1;
                }
                let hard = inst.count(CandidateKind::StateNeg) + inst.count(CandidateKind::IdentityNeg);
                if hard < spec.max_state_negs + spec.max_ident_negs {
                    report.queries_with_extra_easy += 1;
                }
                queries.push(inst);
            }
            Err(CvrError::InsufficientCandidates { .. }) => report.dropped_insufficient.push(q.query_id.clone()),
            Err(e) => return Err(e),
        }
    }
    report.queries = queries.len();
    let bench = Benchmark::new(spec.pool_size, queries);
    bench.validate()?;
    Ok((bench, report))
}

/// Training-time instance before embeddings are attached: hard negatives
/// only, no pool assembly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSkeleton {
    pub query_id: String,
    pub query_text_id: String,
    pub gt_clip_id: String,
    pub context_ids: Vec<String>,
    pub state_negs: Vec<String>,
    pub ident_negs: Vec<String>,
}

pub fn build_training_skeletons(
    ann: &AnnotationSet,
    captions: Option<&EmbeddingStore>,
    rules: &MiningRules,
    context_len: usize,
    caps: (usize, usize),
    workers: usize,
) -> Result<Vec<TrainingSkeleton>> {
    ann.check_structure()?;
    let skeletons = build_queries(ann, context_len);
    let depth = caps.0 + caps.1;
    seed::with_workers(workers, || {
        skeletons
            .par_iter()
            .map(|q| {
                let mut rng = seed::stream(rules.seed, &format!("train/{}", q.query_id));
                let state = mine_state_negatives(ann, q, depth, rules, &mut rng);
                let ident = mine_identity_negatives(ann, q, depth, rules, captions, &mut rng)?;
                let slots = fill_hard_slots(&state, &ident, caps);
                Ok(TrainingSkeleton {
                    query_id: q.query_id.clone(),
                    query_text_id: q.gt_clip_id.clone(),
                    gt_clip_id: q.gt_clip_id.clone(),
                    context_ids: q.context_ids.clone(),
                    state_negs: slots.state_slots,
                    ident_negs: slots.ident_slots,
                })
            })
            .collect()
    })
}

/// Splits videos into disjoint train / eval sets. Deterministic under `seed`.
pub fn split_by_video(ann: &AnnotationSet, train_frac: f64, seed_value: u64) -> Result<(AnnotationSet, AnnotationSet)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(CvrError::InvalidConfig(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let n = ann.videos.len();
    let mut ids: Vec<String> = ann.videos.iter().map(|v| v.video_id.clone()).collect();
    ids.shuffle(&mut seed::stream(seed_value, "split"));
    let mut n_train = (train_frac * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let train: HashSet<String> = ids[..n_train.min(n)].iter().cloned().collect();
    let eval: HashSet<String> = ids[n_train.min(n)..].iter().cloned().collect();
    Ok((ann.subset(&train), ann.subset(&eval)))
}

/// clip id → (video position, step position).
pub fn clip_index(ann: &AnnotationSet) -> HashMap<&str, (usize, usize)> {
    let mut m = HashMap::new();
    for (vi, v) in ann.videos.iter().enumerate() {
        for (si, s) in v.steps.iter().enumerate() {
            m.insert(s.clip_id.as_str(), (vi, si));
        }
    }
    m
}
