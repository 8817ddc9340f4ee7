//! Subcommand bodies. Each one creates a run directory, writes the manifest
//! before doing any work, and hashes its outputs at the end.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mmca::dataset::Dataset;
use mmca::features::{extract_frames, FrameGrid};
use mmca::grid;
use mmca::ingest::{
    downsample_penetration, group_and_clean, parse_points, parse_segment_index, write_points, write_rejections,
    write_segment_index, SegmentIndex, Trajectory,
};
use mmca::model::Checkpoint;
use mmca::synth::generate;
use mmca::training::{sweep, RunRecord};
use mmca::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{create_run_dir, sha256_file, RunManifest};
use crate::pipeline::{
    csv_err, csv_writer, evaluate, model_config_for, prepare, train_on, variant_config, write_evaluation,
    Evaluation, ModelForecaster, Prepared,
};

pub const POINTS_FILE: &str = "points.csv";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const DATASET_FILE: &str = "dataset.mmca";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmca";
pub const RUN_RECORD_FILE: &str = "run_record.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Validation,
    Test,
    All,
}

/// A subcommand with its input paths and options, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Job {
    Synth,
    Extract { points: PathBuf, segments: PathBuf },
    Train { dataset: PathBuf },
    Evaluate { checkpoint: PathBuf, dataset: PathBuf, split: EvalSplit },
    Ablate { dataset: PathBuf, variants: Vec<String> },
    Sweep { dataset: PathBuf, grid: PathBuf },
    Penetration { points: PathBuf, segments: PathBuf, keep_fractions: Vec<f64> },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Synth => "synth",
            Job::Extract { .. } => "extract",
            Job::Train { .. } => "train",
            Job::Evaluate { .. } => "evaluate",
            Job::Ablate { .. } => "ablate",
            Job::Sweep { .. } => "sweep",
            Job::Penetration { .. } => "penetration",
        }
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        match self {
            Job::Synth => vec![],
            Job::Extract { points, segments } | Job::Penetration { points, segments, .. } => {
                vec![("points", points), ("segments", segments)]
            }
            Job::Train { dataset } | Job::Ablate { dataset, .. } => vec![("dataset", dataset)],
            Job::Evaluate { checkpoint, dataset, .. } => vec![("checkpoint", checkpoint), ("dataset", dataset)],
            Job::Sweep { dataset, grid } => vec![("dataset", dataset), ("grid", grid)],
        }
        .into_iter()
        .map(|(r, p)| (r, p.as_path()))
        .collect()
    }
}

/// Run `job` under a fresh run directory in `out`; returns that directory.
pub fn execute(job: &Job, cfg: RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    for (role, p) in job.inputs() {
        if !p.is_file() {
            return Err(Error::Invalid(format!("{role} input {} does not exist", p.display())));
        }
    }
    let dir = create_run_dir(out, cfg.seed())?;
    let mut manifest = RunManifest::new(job.name(), cfg.clone(), serde_json::to_value(job)?, dir.clone());
    for (role, p) in job.inputs() {
        manifest.add_input(role, p)?;
    }
    manifest.write()?;
    log::info!("{} run in {}", job.name(), dir.display());
    match job {
        Job::Synth => synth(&cfg, &dir)?,
        Job::Extract { points, segments } => extract(&cfg, points, segments, &dir)?,
        Job::Train { dataset } => train(&cfg, dataset, &dir)?,
        Job::Evaluate { checkpoint, dataset, split } => evaluate_checkpoint(&cfg, checkpoint, dataset, *split, &dir)?,
        Job::Ablate { dataset, variants } => ablate(&cfg, dataset, variants, &dir)?,
        Job::Sweep { dataset, grid } => sweep_grid(&cfg, dataset, grid, &dir)?,
        Job::Penetration { points, segments, keep_fractions } => {
            penetration(&cfg, points, segments, keep_fractions, &dir)?
        }
    }
    manifest.finish()?;
    Ok(dir)
}

/// Repeat the run described by a manifest, refusing if an input changed.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<PathBuf> {
    let m = RunManifest::load(manifest_path)?;
    let job: Job = serde_json::from_value(m.options.clone())?;
    if job.name() != m.subcommand {
        return Err(Error::Format(format!("manifest subcommand {} does not match its options", m.subcommand)));
    }
    for a in &m.inputs {
        let now = sha256_file(&a.path)?;
        if now != a.sha256 {
            return Err(Error::Invalid(format!("input {} changed since the recorded run", a.path.display())));
        }
    }
    execute(&job, m.config, out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_points_and_segments(cfg: &RunConfig, points: &Path, segments: &Path) -> Result<(Vec<Trajectory>, SegmentIndex, usize, usize)> {
    let parsed = parse_points(fs::File::open(points)?)?;
    let index = parse_segment_index(fs::File::open(segments)?)?;
    let (n_points, n_rejected) = (parsed.points.len(), parsed.rejections.len());
    let trajs = group_and_clean(parsed.points, &cfg.cleaning);
    Ok((trajs, index, n_points, n_rejected))
}

fn load_frames(dataset: &Path) -> Result<FrameGrid> {
    Ok(Dataset::decode(&fs::read(dataset)?)?.grid)
}

fn synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let sc = generate(&cfg.scenario)?;
    write_points(BufWriter::new(fs::File::create(dir.join(POINTS_FILE))?), &sc.points)?;
    write_segment_index(fs::File::create(dir.join(SEGMENTS_FILE))?, &sc.segments)?;
    write_json(&dir.join("waves.json"), &sc.truth.waves)?;
    let mut w = csv_writer(&dir.join("truth_field.csv"))?;
    w.write_record(["date", "interval", "segment_id", "field_speed_mph", "in_wave", "in_lead"]).map_err(csv_err)?;
    let first = grid::parse_day(&cfg.scenario.start_date)?;
    let ids: Vec<&str> = sc.segments.segments().iter().map(|s| s.segment_id.as_str()).collect();
    for d in 0..cfg.scenario.n_days {
        let date = grid::date_of_day(first + d as i64).to_string();
        for step in 0..sc.truth.steps_per_day {
            for (s, id) in ids.iter().enumerate() {
                let c = sc.truth.cell(d, step, s);
                w.write_record([
                    date.clone(),
                    step.to_string(),
                    id.to_string(),
                    sc.truth.speed_field[c].to_string(),
                    (sc.truth.wave_mask[c] as u8).to_string(),
                    (sc.truth.lead_mask[c] as u8).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Dataset { grid: sc.frames, norm_stats: None }.write(BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExtractSummary {
    points_parsed: usize,
    points_rejected: usize,
    journeys_kept: usize,
    days: usize,
    segments: usize,
    imputed_cells: usize,
    total_cells: usize,
}

fn extract(cfg: &RunConfig, points: &Path, segments: &Path, dir: &Path) -> Result<()> {
    let parsed = parse_points(fs::File::open(points)?)?;
    write_rejections(fs::File::create(dir.join("rejections.csv"))?, &parsed.rejections)?;
    let index = parse_segment_index(fs::File::open(segments)?)?;
    let (n_points, n_rejected) = (parsed.points.len(), parsed.rejections.len());
    let trajs = group_and_clean(parsed.points, &cfg.cleaning);
    let grid = extract_frames(&trajs, &index, &cfg.extract)?;
    let summary = ExtractSummary {
        points_parsed: n_points,
        points_rejected: n_rejected,
        journeys_kept: trajs.len(),
        days: grid.days.len(),
        segments: grid.n_segments(),
        imputed_cells: grid.frames.iter().filter(|f| f.is_imputed).count(),
        total_cells: grid.frames.len(),
    };
    write_json(&dir.join("extract_summary.json"), &summary)?;
    Dataset { grid, norm_stats: None }.write(BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SplitSummary {
    train_days: Vec<String>,
    test_days: Vec<String>,
    train_windows: usize,
    validation_windows: usize,
    test_windows: usize,
    clipped_values: u64,
}

fn split_summary(p: &Prepared) -> SplitSummary {
    let dates = |v: &[i64]| v.iter().map(|&d| grid::date_of_day(d).to_string()).collect();
    SplitSummary {
        train_days: dates(&p.train_days),
        test_days: dates(&p.test_days),
        train_windows: p.split.train.len(),
        validation_windows: p.split.validation.len(),
        test_windows: p.split.test.len(),
        clipped_values: p.clipped.total(),
    }
}

fn train(cfg: &RunConfig, dataset: &Path, dir: &Path) -> Result<()> {
    let frames = load_frames(dataset)?;
    let prepared = prepare(&frames, cfg, None)?;
    write_json(&dir.join("split.json"), &split_summary(&prepared))?;
    let outcome = train_on(&prepared, model_config_for(cfg, &frames), cfg)?;
    outcome.record.write_jsonl(BufWriter::new(fs::File::create(dir.join(RUN_RECORD_FILE))?))?;
    let ck = Checkpoint { model: outcome.model, norm_stats: Some(prepared.stats) };
    ck.write(BufWriter::new(fs::File::create(dir.join(CHECKPOINT_FILE))?))?;
    Ok(())
}

fn pick_windows(p: &Prepared, split: EvalSplit) -> Vec<mmca::features::WindowRef> {
    match split {
        EvalSplit::Train => p.split.train.clone(),
        EvalSplit::Validation => p.split.validation.clone(),
        EvalSplit::Test => p.split.test.clone(),
        EvalSplit::All => {
            let mut all = [p.split.train.as_slice(), &p.split.validation, &p.split.test].concat();
            all.sort_by_key(|w| (w.day, w.start));
            all
        }
    }
}

fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, split: EvalSplit, dir: &Path) -> Result<()> {
    let ck = Checkpoint::decode(&fs::read(checkpoint)?)?;
    let stats = ck.norm_stats.ok_or_else(|| Error::Invalid("checkpoint has no normalization statistics".into()))?;
    let frames = load_frames(dataset)?;
    if frames.n_segments() != ck.model.config.n_segments {
        return Err(Error::Invalid(format!(
            "dataset has {} segments, checkpoint expects {}",
            frames.n_segments(),
            ck.model.config.n_segments
        )));
    }
    let mut cfg = cfg.clone();
    cfg.model = ck.model.config.clone();
    let prepared = prepare(&frames, &cfg, Some(&stats))?;
    let windows = pick_windows(&prepared, split);
    if windows.is_empty() {
        return Err(Error::Invalid(format!("the {split:?} split has no windows")));
    }
    let fc = ModelForecaster { model: &ck.model, stats: &stats };
    let ev = evaluate(&fc, &prepared.grid, &windows, &frames.segment_ids, &cfg.eval)?;
    write_evaluation(dir, &ev)
}

/// Test windows when there are any, else validation windows.
fn holdout(p: &Prepared) -> &[mmca::features::WindowRef] {
    if p.split.test.is_empty() {
        log::warn!("no test days; scoring on the validation windows");
        &p.split.validation
    } else {
        &p.split.test
    }
}

#[derive(Debug, Serialize)]
struct ResultRow {
    label: String,
    params: usize,
    best_epoch: usize,
    best_val_loss: f64,
    rmse: f64,
    mae: f64,
    mape: f64,
    picp: f64,
    mpiw: f64,
}

fn result_row(label: String, record: &RunRecord, ev: &Evaluation) -> ResultRow {
    let m = &ev.metrics.overall;
    ResultRow {
        label,
        params: record.param_count,
        best_epoch: record.best_epoch,
        best_val_loss: record.best_val_loss,
        rmse: m.rmse,
        mae: m.mae,
        mape: m.mape,
        picp: ev.intervals.picp,
        mpiw: ev.intervals.mpiw,
    }
}

/// Train, then evaluate on the held-out windows, writing both into `dir`.
fn train_and_score(cfg: &RunConfig, frames: &FrameGrid, model_cfg: mmca::model::ModelConfig, dir: &Path) -> Result<(RunRecord, Evaluation)> {
    fs::create_dir_all(dir)?;
    let prepared = prepare(frames, cfg, None)?;
    let outcome = train_on(&prepared, model_cfg, cfg)?;
    outcome.record.write_jsonl(BufWriter::new(fs::File::create(dir.join(RUN_RECORD_FILE))?))?;
    let fc = ModelForecaster { model: &outcome.model, stats: &prepared.stats };
    let eval_cfg = crate::config::EvalConfig { export_attention: false, ..cfg.eval.clone() };
    let ev = evaluate(&fc, &prepared.grid, holdout(&prepared), &frames.segment_ids, &eval_cfg)?;
    write_json(&dir.join("metrics.json"), &ev.metrics)?;
    write_json(&dir.join("intervals.json"), &ev.intervals)?;
    Ok((outcome.record, ev))
}

fn write_rows(path: &Path, rows: &[ResultRow], first: &str) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([first, "params", "best_epoch", "best_val_loss", "rmse", "mae", "mape", "picp", "mpiw"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.params.to_string(),
            r.best_epoch.to_string(),
            r.best_val_loss.to_string(),
            r.rmse.to_string(),
            r.mae.to_string(),
            r.mape.to_string(),
            r.picp.to_string(),
            r.mpiw.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn ablate(cfg: &RunConfig, dataset: &Path, variants: &[String], dir: &Path) -> Result<()> {
    let frames = load_frames(dataset)?;
    let base = model_config_for(cfg, &frames);
    let configs = variants.iter().map(|v| variant_config(&base, v).map(|c| (v, c))).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (name, mcfg) in configs {
        let (record, ev) = train_and_score(cfg, &frames, mcfg, &dir.join(name))?;
        rows.push(result_row(name.clone(), &record, &ev));
    }
    write_rows(&dir.join("ablation.csv"), &rows, "variant")
}

/// Grid file: a `[grid]` table of dotted config keys to value arrays.
pub fn load_grid(path: &Path) -> Result<BTreeMap<String, Vec<serde_json::Value>>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct GridFile {
        grid: BTreeMap<String, Vec<serde_json::Value>>,
    }
    let text = fs::read_to_string(path)?;
    let g: GridFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
    Ok(g.grid)
}

fn sweep_grid(cfg: &RunConfig, dataset: &Path, grid_path: &Path, dir: &Path) -> Result<()> {
    let frames = load_frames(dataset)?;
    let grid = load_grid(grid_path)?;
    let base = serde_json::to_value(cfg)?;
    let mut k = 0usize;
    let runs = sweep(&grid, &base, |value| {
        let run_cfg: RunConfig = serde_json::from_value(value.clone())?;
        run_cfg.validate()?;
        let prepared = prepare(&frames, &run_cfg, None)?;
        let outcome = train_on(&prepared, model_config_for(&run_cfg, &frames), &run_cfg)?;
        let sub = dir.join(format!("run{k:03}"));
        fs::create_dir_all(&sub)?;
        outcome.record.write_jsonl(BufWriter::new(fs::File::create(sub.join(RUN_RECORD_FILE))?))?;
        fs::write(sub.join("config.toml"), run_cfg.to_toml()?)?;
        k += 1;
        Ok(outcome.record)
    })?;
    let mut w = csv_writer(&dir.join("sweep.csv"))?;
    w.write_record(["rank", "assignment", "best_val_loss", "best_epoch", "epochs"]).map_err(csv_err)?;
    for (rank, r) in runs.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            serde_json::to_string(&r.assignment)?,
            r.record.best_val_loss.to_string(),
            r.record.best_epoch.to_string(),
            r.record.epochs.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    write_json(&dir.join("sweep.json"), &runs)
}

fn penetration(cfg: &RunConfig, points: &Path, segments: &Path, keep_fractions: &[f64], dir: &Path) -> Result<()> {
    let (trajs, index, _, _) = read_points_and_segments(cfg, points, segments)?;
    let mut rows = Vec::new();
    let mut journeys = Vec::new();
    for &keep in keep_fractions {
        let kept = downsample_penetration(&trajs, keep, cfg.seed())?;
        let frames = extract_frames(&kept, &index, &cfg.extract)?;
        let (record, ev) = train_and_score(cfg, &frames, model_config_for(cfg, &frames), &dir.join(format!("keep_{keep:.4}")))?;
        rows.push(result_row(format!("{keep}"), &record, &ev));
        journeys.push((kept.len(), frames.frames.iter().filter(|f| f.is_imputed).count() as f64 / frames.frames.len() as f64));
    }
    write_rows(&dir.join("penetration_metrics.csv"), &rows, "keep_fraction")?;
    let mut w = csv_writer(&dir.join("penetration.csv"))?;
    w.write_record(["keep_fraction", "journeys", "imputed_fraction", "rmse", "mae", "mape"]).map_err(csv_err)?;
    for (r, (n, imp)) in rows.iter().zip(journeys) {
        w.write_record([r.label.clone(), n.to_string(), imp.to_string(), r.rmse.to_string(), r.mae.to_string(), r.mape.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
