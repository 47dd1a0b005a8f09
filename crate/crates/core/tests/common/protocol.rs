//! Random annotation sets and an independent checker for every benchmark
//! invariant.

use std::collections::{HashMap, HashSet};

use cvr_core::bench::{
    assemble_pool, mine_benchmark, EasyStrategy, IdentityStrategy, MiningReport, MiningRules, PoolSpec, QuerySkeleton,
};
use cvr_core::data::{AnnotationSet, Benchmark, CandidateKind, EmbeddingStore, StepRecord, VideoRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_unit, rng};

/// One randomly drawn mining problem.
#[derive(Debug, Clone)]
pub struct Case {
    pub ann: AnnotationSet,
    pub captions: EmbeddingStore,
    pub rules: MiningRules,
    pub spec: PoolSpec,
}

const WORDS: [&str; 8] = ["crack", "egg", "whisk", "pour", "pan", "flip", "stir", "salt"];

fn random_caption(r: &mut ChaCha8Rng) -> String {
    let n = r.random_range(1..4);
    (0..n).map(|_| WORDS[r.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let n_tasks = r.random_range(1..4);
    let mut videos = Vec::new();
    let mut captions = EmbeddingStore::new(4);
    for task in 0..n_tasks {
        for v in 0..r.random_range(1..5) {
            let video_id = format!("t{task}v{v}");
            let labelled = r.random_bool(0.7);
            let mut index = 0u32;
            let mut steps = Vec::new();
            for s in 0..r.random_range(1..8) {
                index += r.random_range(1..3);
                let clip_id = format!("{video_id}c{s}");
                captions.insert(clip_id.clone(), random_unit(&mut r, 4)).unwrap();
                steps.push(StepRecord {
                    clip_id,
                    step_index: index,
                    caption: random_caption(&mut r),
                    task_step_label: labelled.then(|| format!("task{task}/step{s}")),
                });
            }
            videos.push(VideoRecord {
                video_id,
                task_id: format!("task{task}"),
                steps,
            });
        }
    }
    let strategies = [
        IdentityStrategy::CaptionKnn,
        IdentityStrategy::TaskStepMatch,
        IdentityStrategy::TaskStepFallback,
        IdentityStrategy::LexicalJaccard,
    ];
    let rules = MiningRules {
        identity_strategy: strategies[r.random_range(0..strategies.len())],
        easy_strategy: if r.random_bool(0.5) { EasyStrategy::DiffVideo } else { EasyStrategy::DiffTask },
        avoid_immediate_predecessor: r.random_bool(0.5),
        seed: r.random(),
    };
    let spec = PoolSpec {
        context_len: r.random_range(0..7),
        pool_size: r.random_range(2..13),
        max_state_negs: r.random_range(0..5),
        max_ident_negs: r.random_range(0..5),
    };
    Case {
        ann: AnnotationSet { videos },
        captions,
        rules,
        spec,
    }
}

/// Mines `case` and checks the result. Returns the number of mined queries.
pub fn check_case(case: &Case, workers: usize) -> Result<usize, String> {
    let (bench, report) = mine_benchmark(&case.ann, Some(&case.captions), &case.rules, &case.spec, workers)
        .map_err(|e| format!("mining failed: {e}"))?;
    check_benchmark(case, &bench, &report)?;
    Ok(bench.queries.len())
}

pub fn check_benchmark(case: &Case, bench: &Benchmark, report: &MiningReport) -> Result<(), String> {
    let spec = &case.spec;
    let mut where_is: HashMap<&str, (usize, usize)> = HashMap::new();
    for (vi, v) in case.ann.videos.iter().enumerate() {
        for (si, s) in v.steps.iter().enumerate() {
            where_is.insert(&s.clip_id, (vi, si));
        }
    }
    let expected: usize = case.ann.videos.iter().map(|v| v.steps.len().saturating_sub(1)).sum();
    if bench.queries.len() + report.dropped_insufficient.len() != expected {
        return Err(format!(
            "{} mined + {} dropped != {expected} windows",
            bench.queries.len(),
            report.dropped_insufficient.len()
        ));
    }
    for id in &report.dropped_insufficient {
        let &(vi, _) = where_is.get(id.as_str()).ok_or("dropped query is not a clip")?;
        let outside = |pred: &dyn Fn(usize) -> bool| {
            case.ann.videos.iter().enumerate().filter(|(j, _)| pred(*j)).map(|(_, v)| v.steps.len()).sum::<usize>()
        };
        // gt, the state negatives the state cap admits, and every clip of
        // the other videos are always usable under the different-video rule
        let own = (case.ann.videos[vi].steps.len() - 1).min(spec.max_state_negs);
        let reachable = 1 + own + outside(&|j| j != vi);
        if reachable >= spec.pool_size && case.rules.easy_strategy == EasyStrategy::DiffVideo {
            return Err(format!("{id} dropped although {reachable} clips were reachable"));
        }
    }

    for q in &bench.queries {
        let ctx = |m: String| format!("{}: {m}", q.query_id);
        q.validate(spec.pool_size).map_err(|e| ctx(e.to_string()))?;
        if q.candidates.len() != spec.pool_size {
            return Err(ctx(format!("pool size {}", q.candidates.len())));
        }
        let ids: HashSet<&str> = q.candidates.iter().map(|c| c.clip_id.as_str()).collect();
        if ids.len() != q.candidates.len() {
            return Err(ctx("duplicate candidates".into()));
        }
        let &(src, t) = where_is.get(q.gt_clip_id.as_str()).ok_or_else(|| ctx("unknown gt".into()))?;
        let source = &case.ann.videos[src];
        if source.video_id != q.source_video_id || t == 0 {
            return Err(ctx("gt is not a non-initial step of the source video".into()));
        }

        // context: the most recent steps before t, in order
        let start = t.saturating_sub(spec.context_len);
        let want: Vec<&str> = source.steps[start..t].iter().map(|s| s.clip_id.as_str()).collect();
        if q.context_ids.iter().map(String::as_str).collect::<Vec<_>>() != want {
            return Err(ctx(format!("context {:?} != {want:?}", q.context_ids)));
        }

        let mut gts = 0;
        let (mut n_state, mut n_ident) = (0, 0);
        for c in &q.candidates {
            let &(vi, si) = where_is.get(c.clip_id.as_str()).ok_or_else(|| ctx(format!("unknown {}", c.clip_id)))?;
            let video = &case.ann.videos[vi];
            match c.kind {
                CandidateKind::GroundTruth => {
                    gts += 1;
                    if c.clip_id != q.gt_clip_id {
                        return Err(ctx("gt candidate differs from gt id".into()));
                    }
                }
                CandidateKind::StateNeg => {
                    n_state += 1;
                    if vi != src || si == t {
                        return Err(ctx(format!("state negative {} not another step of the source", c.clip_id)));
                    }
                }
                CandidateKind::IdentityNeg => {
                    n_ident += 1;
                    if vi == src {
                        return Err(ctx(format!("identity negative {} from the source video", c.clip_id)));
                    }
                    let task_rule = matches!(
                        case.rules.identity_strategy,
                        IdentityStrategy::TaskStepMatch | IdentityStrategy::TaskStepFallback
                    );
                    if task_rule && video.task_id != source.task_id {
                        return Err(ctx(format!("identity negative {} from another task", c.clip_id)));
                    }
                }
                CandidateKind::EasyNeg => {
                    let ok = match case.rules.easy_strategy {
                        EasyStrategy::DiffVideo => vi != src,
                        EasyStrategy::DiffTask => video.task_id != source.task_id,
                    };
                    if !ok {
                        return Err(ctx(format!("easy negative {} violates the easy rule", c.clip_id)));
                    }
                }
            }
        }
        if gts != 1 {
            return Err(ctx(format!("{gts} ground truths")));
        }
        let cap = spec.max_state_negs + spec.max_ident_negs;
        if n_state + n_ident > cap.min(spec.pool_size - 1) {
            return Err(ctx(format!("{} hard negatives exceed the caps", n_state + n_ident)));
        }
        // Hard slots are never left to easy negatives while hard clips remain.
        let state_avail = (source.steps.len() - 1).min(spec.pool_size - 1);
        if n_state + n_ident < cap.min(spec.pool_size - 1) && n_state < state_avail {
            return Err(ctx("an unused state negative was replaced by an easy one".into()));
        }
    }
    Ok(())
}

/// The documented backfill case: one state negative and five identity
/// negatives under caps (3, 3) in a pool of ten. Returns the counts of
/// ground truth, state, identity and easy candidates.
pub fn backfill_trace() -> [usize; 4] {
    let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let q = QuerySkeleton {
        query_id: "q".into(),
        video: 0,
        step: 1,
        source_video_id: "src".into(),
        gt_clip_id: "gt".into(),
        context_ids: vec!["ctx".into()],
    };
    let inst = assemble_pool(&q, &ids("s", 1), &ids("i", 5), &ids("e", 20), (3, 3), 10, &mut rng(1)).unwrap();
    [
        inst.count(CandidateKind::GroundTruth),
        inst.count(CandidateKind::StateNeg),
        inst.count(CandidateKind::IdentityNeg),
        inst.count(CandidateKind::EasyNeg),
    ]
}
