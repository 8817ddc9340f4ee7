use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mmca::dataset::Dataset;
use mmca_cli::commands::{execute, rerun, EvalSplit, Job, CHECKPOINT_FILE, DATASET_FILE, POINTS_FILE, RUN_RECORD_FILE, SEGMENTS_FILE};
use mmca_cli::config::RunConfig;
use mmca_cli::manifest::{RunManifest, MANIFEST_FILE};
use mmca_cli::pipeline::{evaluate, prepare, OracleForecaster, DEFAULT_VARIANTS};

const TINY: &str = r#"
[scenario]
n_segments = 6
n_days = 3
seed = 4

[scenario.random_waves]
per_day = 2

[model]
d_f = 4
d_a = 8
layers = 1
heads = 1

[train]
max_epochs = 2
early_stop_patience = 1
batch_size = 64
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

fn synth(out: &Path) -> PathBuf {
    execute(&Job::Synth, tiny(), out).unwrap()
}

fn loss_lines(dir: &Path) -> Vec<(f64, f64)> {
    fs::read_to_string(dir.join(RUN_RECORD_FILE))
        .unwrap()
        .lines()
        .filter_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            Some((v.get("train_loss")?.as_f64()?, v.get("val_loss")?.as_f64()?))
        })
        .collect()
}

fn trace_min(trace: &[(f64, f64)]) -> f64 {
    trace.iter().map(|t| t.1).fold(f64::INFINITY, f64::min)
}

#[test]
fn extract_reproduces_synth_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let job = Job::Extract { points: s.join(POINTS_FILE), segments: s.join(SEGMENTS_FILE) };
    let e = execute(&job, tiny(), tmp.path()).unwrap();
    assert_eq!(fs::read(s.join(DATASET_FILE)).unwrap(), fs::read(e.join(DATASET_FILE)).unwrap());
    let m = RunManifest::load(&e.join(MANIFEST_FILE)).unwrap();
    assert!(m.completed);
    assert_eq!(m.inputs.len(), 2);
    assert!(m.outputs.iter().any(|a| a.path.ends_with(DATASET_FILE)));
}

#[test]
fn train_evaluate_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let t = execute(&Job::Train { dataset: s.join(DATASET_FILE) }, tiny(), tmp.path()).unwrap();
    let trace = loss_lines(&t);
    assert_eq!(trace.len(), 2);
    assert!(trace.iter().all(|(a, b)| a.is_finite() && b.is_finite()));

    let again = rerun(&t.join(MANIFEST_FILE), tmp.path()).unwrap();
    assert_ne!(again, t);
    assert_eq!(loss_lines(&again), trace);
    assert_eq!(fs::read(t.join(CHECKPOINT_FILE)).unwrap(), fs::read(again.join(CHECKPOINT_FILE)).unwrap());

    let job = Job::Evaluate { checkpoint: t.join(CHECKPOINT_FILE), dataset: s.join(DATASET_FILE), split: EvalSplit::Test };
    let ev = execute(&job, tiny(), tmp.path()).unwrap();
    for f in ["metrics.json", "bins.csv", "intervals.json", "errors.csv", "attention_scores.csv"] {
        assert!(ev.join(f).is_file(), "{f} missing");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["by_horizon"].as_array().unwrap().len(), 12);
}

#[test]
fn rerun_refuses_changed_input() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let copy = tmp.path().join("copy.mmca");
    fs::copy(s.join(DATASET_FILE), &copy).unwrap();
    let t = execute(&Job::Train { dataset: copy.clone() }, tiny(), tmp.path()).unwrap();
    let mut bytes = fs::read(&copy).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    fs::write(&copy, bytes).unwrap();
    let err = rerun(&t.join(MANIFEST_FILE), tmp.path()).unwrap_err();
    assert!(err.to_string().contains("changed"), "{err}");
}

#[test]
fn oracle_forecaster_scores_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let cfg = tiny();
    let frames = Dataset::decode(&fs::read(s.join(DATASET_FILE)).unwrap()).unwrap().grid;
    let p = prepare(&frames, &cfg, None).unwrap();
    let fc = OracleForecaster { history: 12, horizon: 12, n_segments: frames.n_segments(), scale: 1.0, df: 5.0 };
    let ev = evaluate(&fc, &p.grid, &p.split.test, &frames.segment_ids, &cfg.eval).unwrap();
    assert_eq!(ev.metrics.overall.rmse, 0.0);
    assert_eq!(ev.metrics.overall.mae, 0.0);
    assert_eq!(ev.metrics.overall.mape, 0.0);
    assert_eq!(ev.intervals.picp, 1.0);
    assert!(ev.scores.is_none());
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let mut cfg = tiny();
    cfg.train.max_epochs = 1;
    let variants: Vec<String> = DEFAULT_VARIANTS.iter().map(|v| v.to_string()).collect();
    let a = execute(&Job::Ablate { dataset: s.join(DATASET_FILE), variants: variants.clone() }, cfg, tmp.path()).unwrap();
    let mut r = csv::Reader::from_path(a.join("ablation.csv")).unwrap();
    let labels: Vec<String> = r.records().map(|x| x.unwrap()[0].to_string()).collect();
    assert_eq!(labels, variants);
    for v in &variants {
        assert!(a.join(v).join("metrics.json").is_file());
    }
}

#[test]
fn unknown_variant_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let job = Job::Ablate { dataset: s.join(DATASET_FILE), variants: vec!["no_wheels".into()] };
    let err = execute(&job, tiny(), tmp.path()).unwrap_err();
    assert_eq!(mmca_cli::error_kind(&err), "config");
}

#[test]
fn sweep_ranks_by_validation_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let grid = tmp.path().join("grid.toml");
    fs::write(&grid, "[grid]\n\"train.learning_rate\" = [1e-5, 3e-3]\n").unwrap();
    let mut cfg = tiny();
    cfg.train.max_epochs = 1;
    let d = execute(&Job::Sweep { dataset: s.join(DATASET_FILE), grid }, cfg, tmp.path()).unwrap();
    let runs: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(d.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(runs.len(), 2);
    let losses: Vec<f64> = runs.iter().map(|r| r["record"]["best_val_loss"].as_f64().unwrap()).collect();
    assert!(losses[0] <= losses[1]);
    assert!(d.join("run000").join(RUN_RECORD_FILE).is_file());
    assert!(d.join("run001").join("config.toml").is_file());
}

#[test]
fn run_record_summary_matches_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(tmp.path());
    let t = execute(&Job::Train { dataset: s.join(DATASET_FILE) }, tiny(), tmp.path()).unwrap();
    let text = fs::read_to_string(t.join(RUN_RECORD_FILE)).unwrap();
    let summary: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let s = &summary["summary"];
    assert!(s["best_epoch"].as_u64().unwrap() < 2);
    assert!(s["param_count"].as_u64().unwrap() > 0);
    let best = trace_min(&loss_lines(&t));
    assert_eq!(s["best_val_loss"].as_f64().unwrap(), best);
}

fn mmca(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmca")).args(args).env("RUST_LOG", "off").output().unwrap()
}

fn error_of(out: &std::process::Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

#[test]
fn missing_input_reports_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let v = error_of(&mmca(&["train", "--dataset", "/nonexistent/d.mmca", "--out", out]));
    assert_eq!(v["error"]["kind"], "invalid-input");
    assert!(v["error"]["message"].as_str().unwrap().contains("/nonexistent/d.mmca"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn bad_config_reports_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let v = error_of(&mmca(&["synth", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]));
    assert_eq!(v["error"]["kind"], "config");
}

#[test]
fn corrupt_dataset_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d.mmca");
    fs::write(&d, b"{\"format\":\"something-else\"}\n").unwrap();
    let out = tmp.path().join("runs");
    let v = error_of(&mmca(&["train", "--dataset", d.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(["json", "format"].contains(&v["error"]["kind"].as_str().unwrap()), "{v}");
}

#[test]
fn binary_prints_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = mmca(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-s9"));
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.seed, 9);
    assert_eq!(m.config.scenario.seed, 9);
}
