use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvr")).args(args).output().expect("run cvr")
}

#[track_caller]
fn ok(args: &[&str]) -> Output {
    let out = cvr(args);
    assert!(
        out.status.success(),
        "cvr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_WORLD: [&str; 8] = ["--d", "64", "--tasks", "3", "--videos-per-task", "4", "--steps", "5"];
const FAST: [&str; 6] = ["--epochs", "4", "--heads", "4", "--batch-size", "8"];

fn j(dir: &Path, file: &str) -> String {
    dir.join(file).display().to_string()
}

/// synth, split, mine, train into `root`.
fn pipeline(root: &Path, workers: &str) {
    let (w, s, m, t) = (root.join("world"), root.join("split"), root.join("mine"), root.join("train"));
    let (ann, captions) = (j(&w, "ann.json"), j(&w, "captions.emb"));
    let (fit, clips, texts) = (j(&s, "fit.json"), j(&w, "clips.emb"), j(&w, "texts.emb"));
    ok(&[&["synth", "--out", p(&w)][..], &SMALL_WORLD].concat());
    ok(&["split", "--ann", &ann, "--out", p(&s)]);
    ok(&["mine", "--ann", &ann, "--captions", &captions, "--split", p(&s), "--out", p(&m), "--workers", workers]);
    let train = [
        "train", "--ann", &fit, "--clips", &clips, "--texts", &texts, "--captions", &captions, "--out", p(&t),
        "--workers", workers,
    ];
    ok(&[&train[..], &FAST].concat());
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["synth", "mine", "split", "train", "grid", "eval", "sweep", "report"] {
        let out = cvr(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(cvr(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(cvr(&["mine", "--bogus"]).status.code(), Some(2));
    assert_eq!(cvr(&[]).status.code(), Some(2));
}

#[test]
fn full_pipeline_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root, "2");
    let (w, m, t) = (root.join("world"), root.join("mine"), root.join("train"));
    let (clips, texts) = (j(&w, "clips.emb"), j(&w, "texts.emb"));
    let stores = ["--clips", clips.as_str(), "--texts", texts.as_str()];
    let (val, test, ckpt) = (j(&m, "bench_val.json"), j(&m, "bench_eval.json"), j(&t, "model.ckpt"));
    let grid = root.join("grid");
    let weights = j(&grid, "grid.json");
    let grid_args = ["grid", "--bench", &val, "--checkpoint", &ckpt, "--out", p(&grid), "--heads", "4"];
    ok(&[&grid_args[..], &stores].concat());
    let eval = root.join("eval");
    let eval_args = [
        "eval", "--mode", "full", "--bench", &test, "--checkpoint", &ckpt, "--weights", &weights, "--out", p(&eval),
    ];
    ok(&[&eval_args[..], &stores].concat());
    let oracle = root.join("oracle");
    let latents = j(&w, "latents.json");
    let oracle_args = ["eval", "--mode", "oracle", "--latents", &latents, "--bench", &test, "--out", p(&oracle)];
    ok(&[&oracle_args[..], &stores].concat());
    let rep = root.join("report");
    let (r1, r2) = (j(&eval, "report.json"), j(&oracle, "report.json"));
    let out = ok(&["report", "--input", &r1, &r2, "--out", p(&rep)]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("macro-average") && table.contains("oracle"), "{table}");
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    for d in ["world", "split", "mine", "train", "grid", "eval", "oracle", "report"] {
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(root.join(d).join("manifest.json")).unwrap()).unwrap();
        assert!(manifest["config_sha256"].as_str().unwrap().len() == 64, "{d}");
        assert!(!manifest["artifacts"].as_array().unwrap().is_empty(), "{d}");
        assert!(root.join(d).join("config.json").exists(), "{d}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["epochs"], 4);
}

#[test]
fn cast_modes_without_checkpoint_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["cast", "full", "semantic", "learned-late"] {
        let out = cvr(&[
            "eval",
            "--mode",
            mode,
            "--wv",
            "0.1",
            "--wp",
            "0.5",
            "--bench",
            "b.json",
            "--clips",
            "c.emb",
            "--texts",
            "t.emb",
            "--out",
            p(dir.path()),
        ]);
        assert_eq!(out.status.code(), Some(2), "{mode}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"), "{mode}");
    }
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvr(&[
        "eval",
        "--mode",
        "text",
        "--bench",
        p(&dir.path().join("missing.json")),
        "--clips",
        "c.emb",
        "--texts",
        "t.emb",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "data");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 7, "seed": 5, "L": 2}"#).unwrap();
    let w = dir.path().join("w");
    ok(&[&["synth", "--out", p(&w)][..], &SMALL_WORLD].concat());
    let s = dir.path().join("s");
    ok(&["split", "--ann", p(&w.join("ann.json")), "--out", p(&s), "--config", p(&cfg), "--seed", "9"]);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["epochs"], 7);
    assert_eq!(resolved["config"]["L"], 2);
    assert_eq!(resolved["config"]["seed"], 9);

    fs::write(&cfg, r#"{"tau": -1}"#).unwrap();
    let out = cvr(&["split", "--ann", p(&w.join("ann.json")), "--out", p(&s), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_do_not_depend_on_workers_or_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [("a", "1"), ("b", "1"), ("c", "8")].map(|(name, workers)| {
        let root = dir.path().join(name);
        pipeline(&root, workers);
        root
    });
    let primary = [
        "world/ann.json",
        "world/clips.emb",
        "world/texts.emb",
        "world/latents.json",
        "split/fit.json",
        "split/val.json",
        "split/eval.json",
        "mine/bench.json",
        "mine/bench_val.json",
        "mine/bench_eval.json",
        "mine/mining_report.json",
        "train/model.ckpt",
        "train/loss.csv",
    ];
    for f in primary {
        let a = fs::read(runs[0].join(f)).unwrap();
        assert_eq!(a, fs::read(runs[1].join(f)).unwrap(), "{f} differs between reruns");
        assert_eq!(a, fs::read(runs[2].join(f)).unwrap(), "{f} differs between 1 and 8 workers");
    }
}
