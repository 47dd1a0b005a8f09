use std::collections::HashSet;
use std::path::Path;

use cvr_core::adapter::{Model, ModelKind};
use cvr_core::bench::{mine_benchmark, IdentityStrategy, MiningRules};
use cvr_core::data::{AnnotationSet, Benchmark, EmbeddingStore, RunConfig};
use cvr_core::eval::{evaluate, evaluate_with, EnsembleWeights, EvalReport, GridResult, ScoreMode, Scorer};
use cvr_core::pipeline::{self, Splits, Stores};
use cvr_core::seed;
use cvr_core::synth::{self, WorldLatents, WorldSpec};
use cvr_core::train::curve_csv;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::output::Run;
use crate::render;

fn load_ann(run: &mut Run, path: &Path) -> CliResult<AnnotationSet> {
    run.input(path)?;
    Ok(AnnotationSet::load(path)?)
}

fn load_store(run: &mut Run, path: &Path, normalize: bool) -> CliResult<EmbeddingStore> {
    run.input(path)?;
    Ok(EmbeddingStore::load(path, normalize)?)
}

fn load_stores(run: &mut Run, s: &StoreArgs) -> CliResult<(EmbeddingStore, EmbeddingStore)> {
    let clips = load_store(run, &s.clips, !s.no_normalize)?;
    let texts = load_store(run, &s.texts, !s.no_normalize)?;
    if clips.dim() != texts.dim() {
        return Err(CliError::Data(format!("clip store has d={}, text store d={}", clips.dim(), texts.dim())));
    }
    Ok((clips, texts))
}

fn load_captions(run: &mut Run, path: Option<&Path>, rules: &MiningRules) -> CliResult<Option<EmbeddingStore>> {
    match path {
        Some(p) => Ok(Some(load_store(run, p, true)?)),
        None if rules.identity_strategy == IdentityStrategy::CaptionKnn => {
            Err(CliError::Usage("--captions is required by --identity caption-knn".into()))
        }
        None => Ok(None),
    }
}

fn load_bench(run: &mut Run, path: &Path) -> CliResult<Benchmark> {
    run.input(path)?;
    Ok(Benchmark::load(path)?)
}

fn load_model(run: &mut Run, path: &Path) -> CliResult<Model> {
    run.input(path)?;
    Ok(Model::load(path)?)
}

fn load_splits(run: &mut Run, dir: &Path) -> CliResult<Splits> {
    Ok(Splits {
        fit: load_ann(run, &dir.join("fit.json"))?,
        val: load_ann(run, &dir.join("val.json"))?,
        eval: load_ann(run, &dir.join("eval.json"))?,
    })
}

fn check_dim(cfg: &RunConfig, clips: &EmbeddingStore) -> CliResult<()> {
    if cfg.d != 0 && cfg.d != clips.dim() {
        return Err(CliError::Usage(format!("config d={} but the clip store has d={}", cfg.d, clips.dim())));
    }
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    extra: T,
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut run = Run::new("synth", &a.out.out, None)?;
    let mut spec = match &a.spec {
        Some(p) => {
            run.input(p)?;
            WorldSpec::load(p).map_err(|e| CliError::Usage(format!("--spec {}: {e}", p.display())))?
        }
        None => WorldSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    set!(seed => seed, d => d, tasks => n_tasks, videos_per_task => videos_per_task, steps => steps_per_video,
         sigma_n => sigma_n, sigma_q => sigma_q);
    let world = synth::generate(&spec)?;
    let store_bytes = |s: &EmbeddingStore| -> CliResult<Vec<u8>> {
        let mut b = Vec::new();
        s.write_to(&mut b)?;
        Ok(b)
    };
    run.write("ann.json", world.annotations.to_json()?.as_bytes())?;
    run.write("clips.emb", &store_bytes(&world.clips)?)?;
    run.write("texts.emb", &store_bytes(&world.texts)?)?;
    run.write("captions.emb", &store_bytes(&world.captions)?)?;
    run.write("latents.json", world.latents.to_json()?.as_bytes())?;
    println!(
        "synth: {} videos, {} clips, d={}",
        world.annotations.videos.len(),
        world.clips.len(),
        spec.d
    );
    run.finish(&spec, Some(spec.seed))
}

pub fn split(a: &SplitArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let mut run = Run::new("split", &a.out.out, None)?;
    let ann = load_ann(&mut run, &a.ann)?;
    let s = pipeline::split(&ann, a.train_frac, &cfg)?;
    let ids = |x: &AnnotationSet| x.videos.iter().map(|v| v.video_id.clone()).collect::<HashSet<_>>();
    let train = ann.subset(&ids(&s.fit).union(&ids(&s.val)).cloned().collect());
    for (name, set) in [("fit.json", &s.fit), ("val.json", &s.val), ("eval.json", &s.eval), ("train.json", &train)] {
        run.write(name, set.to_json()?.as_bytes())?;
    }
    println!(
        "split: {} fit, {} val, {} eval videos",
        s.fit.videos.len(),
        s.val.videos.len(),
        s.eval.videos.len()
    );
    #[derive(Serialize)]
    struct Extra {
        train_frac: f64,
    }
    run.finish(&Resolved { config: &cfg, extra: Extra { train_frac: a.train_frac } }, Some(cfg.seed))
}

#[derive(Serialize)]
struct MiningExtra {
    mining: MiningRules,
}

pub fn mine(a: &MineArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let rules = a.mining.rules(cfg.seed);
    let mut run = Run::new("mine", &a.out.out, Some(a.out.workers))?;
    let ann = load_ann(&mut run, &a.ann)?;
    let captions = load_captions(&mut run, a.captions.as_deref(), &rules)?;
    let (bench, report) = mine_benchmark(&ann, captions.as_ref(), &rules, &pipeline::pool_spec(&cfg), a.out.workers.into())?;
    run.write("bench.json", bench.to_json()?.as_bytes())?;
    run.write_json("mining_report.json", &report)?;
    if let Some(dir) = &a.split {
        let splits = load_splits(&mut run, dir)?;
        for (name, set) in [("bench_val.json", &splits.val), ("bench_eval.json", &splits.eval)] {
            let ids: HashSet<String> = set.videos.iter().map(|v| v.video_id.clone()).collect();
            run.write(name, bench.restrict_to_videos(&ids).to_json()?.as_bytes())?;
        }
    }
    println!(
        "mine: {} queries, {} dropped, kinds {:?}",
        report.queries,
        report.dropped_insufficient.len(),
        report.kind_counts
    );
    run.finish(&Resolved { config: &cfg, extra: MiningExtra { mining: rules } }, Some(cfg.seed))
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let rules = a.mining.rules(cfg.seed);
    let workers = a.out.workers.into();
    let mut run = Run::new("train", &a.out.out, Some(a.out.workers))?;
    let ann = load_ann(&mut run, &a.ann)?;
    let (clips, texts) = load_stores(&mut run, &a.stores)?;
    check_dim(&cfg, &clips)?;
    let captions = load_captions(&mut run, a.captions.as_deref(), &rules)?;
    let data = pipeline::training_instances(&ann, &clips, &texts, captions.as_ref(), &rules, &cfg, workers)?;
    let kind = ModelKind::from(a.model);
    let (model, curve) = pipeline::train_model(kind, clips.dim(), &data, &cfg, workers)?;
    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    run.write("model.ckpt", &bytes)?;
    run.write("loss.csv", curve_csv(&curve).as_bytes())?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!(
            "train: {kind}, {} instances, loss {:.4} -> {:.4} over {} epochs",
            data.len(),
            first.mean_loss,
            last.mean_loss,
            curve.len()
        );
    }
    #[derive(Serialize)]
    struct Extra {
        mining: MiningRules,
        model: String,
    }
    let extra = Extra {
        mining: rules,
        model: kind.to_string(),
    };
    run.finish(&Resolved { config: &cfg, extra }, Some(cfg.seed))
}

/// Contents of `grid.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct GridFile {
    pub mode: String,
    #[serde(flatten)]
    pub result: GridResult,
}

pub fn grid(a: &GridArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let mut run = Run::new("grid", &a.out.out, Some(a.out.workers))?;
    let bench = load_bench(&mut run, &a.bench)?;
    let (clips, texts) = load_stores(&mut run, &a.stores)?;
    let model = load_model(&mut run, &a.checkpoint)?;
    let scorer = Scorer {
        clips: &clips,
        texts: &texts,
        model: Some(&model),
        context_len: cfg.context_len,
    };
    let (mode, result) = pipeline::select_weights(&bench, &scorer, &cfg, a.out.workers.into())?;
    let mut csv = String::from("w_v,w_p,acc,mnr\n");
    for p in &result.points {
        csv.push_str(&format!("{},{},{},{}\n", p.w_v, p.w_p, p.acc, p.mnr));
    }
    println!("grid: {mode} best w_v={} w_p={}", result.best.w_v, result.best.w_p);
    run.write_json("grid.json", &GridFile { mode: mode.to_string(), result })?;
    run.write("grid.csv", csv.as_bytes())?;
    run.finish(&Resolved { config: &cfg, extra: () }, Some(cfg.seed))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let oracle = a.mode == "oracle";
    let mode = if oracle {
        None
    } else {
        let m: ScoreMode = a.mode.parse().map_err(|e: cvr_core::CvrError| CliError::Usage(e.to_string()))?;
        Some(match m {
            ScoreMode::HeuristicLateFusion { .. } if a.mode == "late" => ScoreMode::HeuristicLateFusion { alpha: cfg.alpha },
            m => m,
        })
    };
    if let Some(m) = mode {
        if (m.needs_predictor() || m == ScoreMode::LearnedLateFusion) && a.checkpoint.is_none() {
            return Err(CliError::Usage(format!("--checkpoint is required by --mode {m}")));
        }
    }
    if oracle && a.latents.is_none() {
        return Err(CliError::Usage("--latents is required by --mode oracle".into()));
    }
    let ensemble = matches!(mode, Some(ScoreMode::FullEnsemble | ScoreMode::SemanticEnsemble));
    if ensemble && a.weights.is_none() && (a.wv.is_none() || a.wp.is_none()) {
        return Err(CliError::Usage("ensemble modes need --weights or both --wv and --wp".into()));
    }

    let workers = a.out.workers.into();
    let mut run = Run::new("eval", &a.out.out, Some(a.out.workers))?;
    let bench = load_bench(&mut run, &a.bench)?;
    let (clips, texts) = load_stores(&mut run, &a.stores)?;
    let weights = match &a.weights {
        Some(p) => {
            run.input(p)?;
            let g: GridFile = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            g.result.best
        }
        None => EnsembleWeights {
            w_v: a.wv.unwrap_or(0.0),
            w_p: a.wp.unwrap_or(0.0),
        },
    };
    let report = match mode {
        None => {
            let path = a.latents.as_deref().expect("checked above");
            run.input(path)?;
            let latents = WorldLatents::load(path)?;
            seed::with_workers(workers, || {
                evaluate_with(&bench, "oracle".into(), |q| synth::oracle_score(q, &latents, &clips))
            })?
        }
        Some(m) => {
            let model = a.checkpoint.as_deref().map(|p| load_model(&mut run, p)).transpose()?;
            let scorer = Scorer {
                clips: &clips,
                texts: &texts,
                model: model.as_ref(),
                context_len: cfg.context_len,
            };
            seed::with_workers(workers, || evaluate(&bench, &scorer, weights, m))?
        }
    };
    run.write_json("report.json", &report)?;
    run.write("records.csv", report.records_csv().as_bytes())?;
    let table = render::table(&[("eval".to_string(), &report)]);
    print!("{table}");
    run.write("report.txt", table.as_bytes())?;
    #[derive(Serialize)]
    struct Extra<'a> {
        mode: &'a str,
        weights: EnsembleWeights,
    }
    run.finish(&Resolved { config: &cfg, extra: Extra { mode: &report.mode, weights } }, Some(cfg.seed))
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let rules = a.mining.rules(cfg.seed);
    let workers = a.out.workers.into();
    let max_len = a.lengths.iter().copied().max().ok_or_else(|| CliError::Usage("--lengths is empty".into()))?;
    let mut run = Run::new("sweep", &a.out.out, Some(a.out.workers))?;
    let ann = load_ann(&mut run, &a.ann)?;
    let splits = load_splits(&mut run, &a.split)?;
    let (clips, texts) = load_stores(&mut run, &a.stores)?;
    check_dim(&cfg, &clips)?;
    let captions = load_captions(&mut run, a.captions.as_deref(), &rules)?;
    let mine_cfg = RunConfig {
        context_len: max_len,
        ..cfg.clone()
    };
    let benches = pipeline::mine_split_benchmarks(&ann, &splits, captions.as_ref(), &rules, &mine_cfg, workers)?;
    let stores = Stores {
        clips: &clips,
        texts: &texts,
        captions: captions.as_ref(),
    };
    let rows = pipeline::context_sweep(&splits, &benches, stores, &rules, &cfg, &a.lengths, workers)?;
    let csv = pipeline::sweep_csv(&rows);
    print!("{csv}");
    run.write("sweep.csv", csv.as_bytes())?;
    run.write_json("sweep.json", &rows)?;
    #[derive(Serialize)]
    struct Extra<'a> {
        mining: MiningRules,
        lengths: &'a [usize],
    }
    let extra = Extra {
        mining: rules,
        lengths: &a.lengths,
    };
    run.finish(&Resolved { config: &cfg, extra }, Some(cfg.seed))
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let mut run = Run::new("report", &a.out, None)?;
    let mut reports = Vec::new();
    for p in &a.inputs {
        run.input(p)?;
        let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        reports.push((p.display().to_string(), r));
    }
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    let table = render::table(&rows);
    print!("{table}");
    run.write("report.txt", table.as_bytes())?;
    run.write("report.csv", render::csv(&rows).as_bytes())?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        inputs: Vec<&'a str>,
    }
    run.finish(&Resolved { inputs: reports.iter().map(|(n, _)| n.as_str()).collect() }, None)
}
