//! Stages shared by the subcommands: data preparation, training and
//! evaluation against any [`Forecaster`].

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use mmca::features::{build_windows, ClipReport, FrameGrid, NormStats, NormalizedGrid, WindowRef, FEATURE_NAMES};
use mmca::model::{AttentionScores, Batch, Model, ModelConfig, TDistForecast};
use mmca::objective::{
    binned_metrics, denormalize_forecast, fit_t_errors, interval_eval, intervals, point_metrics, BinMetrics,
    IntervalReport, PointMetrics, TFit, MIN_FIT_SAMPLES,
};
use mmca::training::{split_by_date, train, Split, TrainOutcome};
use mmca::{grid, Error, Result};
use serde::Serialize;

use crate::config::{EvalConfig, RunConfig};

/// A dataset cut into windows, normalized with training-day statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: NormalizedGrid,
    pub stats: NormStats,
    pub clipped: ClipReport,
    pub split: Split,
    pub train_days: Vec<i64>,
    pub test_days: Vec<i64>,
}

pub fn model_config_for(cfg: &RunConfig, frames: &FrameGrid) -> ModelConfig {
    ModelConfig { n_segments: frames.n_segments(), steps_per_day: frames.steps_per_day, ..cfg.model.clone() }
}

/// Split days, fit normalization on the training days, and build windows.
/// `stats` overrides the fit, as when evaluating a trained checkpoint.
pub fn prepare(frames: &FrameGrid, cfg: &RunConfig, stats: Option<&NormStats>) -> Result<Prepared> {
    let (train_days, test_days) = cfg.split.resolve(&frames.days)?;
    let positions: Vec<usize> =
        frames.days.iter().enumerate().filter(|(_, d)| train_days.contains(d)).map(|(i, _)| i).collect();
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(frames, &positions)?,
    };
    let (grid, clipped) = NormalizedGrid::new(frames, &stats)?;
    if clipped.total() > 0 {
        log::warn!("{} feature values fell outside the training range and were clipped", clipped.total());
    }
    let windows = build_windows(frames, cfg.model.history, cfg.model.horizon);
    let split = split_by_date(&windows, &train_days, &test_days, cfg.train.validation_fraction)?;
    Ok(Prepared { grid, stats, clipped, split, train_days, test_days })
}

pub fn train_on(prepared: &Prepared, model_cfg: ModelConfig, cfg: &RunConfig) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg)?;
    train(&model, &prepared.grid, &prepared.split.train, &prepared.split.validation, &cfg.train)
}

/// Anything that turns a batch into Student-t forecasts in mph.
pub trait Forecaster {
    fn history(&self) -> usize;
    fn horizon(&self) -> usize;
    fn forecast(&self, batch: &Batch) -> Result<TDistForecast>;
    fn forecast_with_scores(&self, batch: &Batch) -> Result<(TDistForecast, Option<AttentionScores>)> {
        Ok((self.forecast(batch)?, None))
    }
}

pub struct ModelForecaster<'a> {
    pub model: &'a Model,
    pub stats: &'a NormStats,
}

impl Forecaster for ModelForecaster<'_> {
    fn history(&self) -> usize {
        self.model.config.history
    }

    fn horizon(&self) -> usize {
        self.model.config.horizon
    }

    fn forecast(&self, batch: &Batch) -> Result<TDistForecast> {
        Ok(denormalize_forecast(&self.model.predict(batch)?, self.stats))
    }

    fn forecast_with_scores(&self, batch: &Batch) -> Result<(TDistForecast, Option<AttentionScores>)> {
        let (fc, scores) = self.model.predict_with_scores(batch, true)?;
        Ok((denormalize_forecast(&fc, self.stats), scores))
    }
}

/// Predicts the observed targets exactly.
pub struct OracleForecaster {
    pub history: usize,
    pub horizon: usize,
    pub n_segments: usize,
    pub scale: f64,
    pub df: f64,
}

impl Forecaster for OracleForecaster {
    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, batch: &Batch) -> Result<TDistForecast> {
        let n = batch.target_mph.len();
        Ok(TDistForecast {
            shape: [batch.size, self.n_segments, self.horizon],
            mean: batch.target_mph.clone(),
            scale2: vec![self.scale * self.scale; n],
            df: vec![self.df; n],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub overall: PointMetrics,
    pub by_horizon: Vec<PointMetrics>,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub date: String,
    pub window_start: usize,
    pub segment: String,
    pub horizon: usize,
    pub observed_mph: f64,
    pub predicted_mph: f64,
    pub error_mph: f64,
    pub lower_mph: f64,
    pub upper_mph: f64,
    pub scale_mph: f64,
    pub df: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub bins: Vec<BinMetrics>,
    pub intervals: IntervalReport,
    pub scores: Option<AttentionScores>,
    pub errors: Vec<ErrorRow>,
    /// Student-t fit of the point errors; `None` with too few samples.
    pub error_fit: Option<TFit>,
}

pub fn evaluate(fc: &dyn Forecaster, grid: &NormalizedGrid, windows: &[WindowRef], segment_ids: &[String], cfg: &EvalConfig) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Invalid("no windows to evaluate".into()));
    }
    let (h, f, n) = (fc.history(), fc.horizon(), grid.n_segments);
    let mut y = Vec::new();
    let mut yhat = Vec::new();
    let mut horizon = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut errors = Vec::new();
    let mut scores: Option<AttentionScores> = None;
    for chunk in windows.chunks(cfg.batch_size) {
        let batch = Batch::gather(grid, chunk, h, f)?;
        let (out, s) = if cfg.export_attention { fc.forecast_with_scores(&batch)? } else { (fc.forecast(&batch)?, None) };
        if let Some(s) = s {
            match scores.as_mut() {
                Some(acc) => acc.merge(&s)?,
                None => scores = Some(s),
            }
        }
        let (l, u) = intervals(&out, cfg.alpha)?;
        for (bi, w) in chunk.iter().enumerate() {
            let date = grid::date_of_day(w.day).to_string();
            for s in 0..n {
                for t in 0..f {
                    let i = (bi * n + s) * f + t;
                    let (obs, pred) = (batch.target_mph[i], out.mean[i]);
                    errors.push(ErrorRow {
                        date: date.clone(),
                        window_start: w.start,
                        segment: segment_ids.get(s).cloned().unwrap_or_else(|| s.to_string()),
                        horizon: t + 1,
                        observed_mph: obs,
                        predicted_mph: pred,
                        error_mph: obs - pred,
                        lower_mph: l[i],
                        upper_mph: u[i],
                        scale_mph: out.scale2[i].sqrt(),
                        df: out.df[i],
                    });
                }
            }
        }
        y.extend_from_slice(&batch.target_mph);
        yhat.extend_from_slice(&out.mean);
        horizon.extend((0..batch.target_mph.len()).map(|i| i % f));
        lo.extend(l);
        hi.extend(u);
    }
    let eps = cfg.mape_epsilon_mph;
    let by_horizon = (0..f)
        .map(|t| {
            let (a, p): (Vec<f64>, Vec<f64>) =
                horizon.iter().zip(y.iter().zip(&yhat)).filter(|(k, _)| **k == t).map(|(_, (a, p))| (*a, *p)).unzip();
            point_metrics(&a, &p, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = Metrics { overall: point_metrics(&y, &yhat, eps)?, by_horizon, windows: windows.len() };
    let bins = binned_metrics(&y, &yhat, eps)?;
    let intervals = interval_eval(&lo, &hi, &y, &horizon, f, cfg.alpha)?;
    let residuals: Vec<f64> = errors.iter().map(|e| e.error_mph).collect();
    let error_fit = if residuals.len() >= MIN_FIT_SAMPLES { fit_t_errors(&residuals).ok() } else { None };
    Ok(Evaluation { metrics, bins, intervals, scores, errors, error_fit })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// metrics.json, bins.csv, intervals.json, errors.csv, error_fit.json and
/// qq.csv, plus attention_scores.csv when scores were captured.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    write_json(&dir.join("metrics.json"), &ev.metrics)?;
    let mut w = csv_writer(&dir.join("bins.csv"))?;
    w.write_record(["bin", "rmse", "mae", "mape", "count"]).map_err(csv_err)?;
    for b in &ev.bins {
        let m = &b.metrics;
        w.write_record([b.bin.clone(), m.rmse.to_string(), m.mae.to_string(), m.mape.to_string(), m.count.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    write_json(&dir.join("intervals.json"), &ev.intervals)?;
    let mut w = csv_writer(&dir.join("errors.csv"))?;
    for row in &ev.errors {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    if let Some(fit) = &ev.error_fit {
        write_json(&dir.join("error_fit.json"), fit)?;
        let mut w = csv_writer(&dir.join("qq.csv"))?;
        w.write_record(["theoretical", "sample"]).map_err(csv_err)?;
        for (a, b) in &fit.qq {
            w.write_record([a.to_string(), b.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
    }
    if let Some(s) = &ev.scores {
        s.write_csv(BufWriter::new(fs::File::create(dir.join("attention_scores.csv"))?))?;
    }
    Ok(())
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?)))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e)
}

/// Model config for a named ablation variant.
///
/// `full`, `no_temporal`, `no_spatial`, `no_cross`, `no_micro`, or
/// `no_<feature>` for one micro feature such as `no_f_hard_brk`.
pub fn variant_config(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut c = base.clone();
    match name {
        "full" => {}
        "no_temporal" => c.use_temporal = false,
        "no_spatial" => c.use_spatial = false,
        "no_cross" => c.use_cross_attention = false,
        "no_micro" => c.use_micro = false,
        other => {
            let feature = other.strip_prefix("no_").unwrap_or("");
            let k = FEATURE_NAMES[2..]
                .iter()
                .position(|f| *f == feature)
                .ok_or_else(|| Error::Config(format!("unknown variant {other:?}")))?;
            c.micro_feature_mask[k] = true;
        }
    }
    Ok(c)
}

/// The five rows of the default ablation table.
pub const DEFAULT_VARIANTS: [&str; 5] = ["full", "no_temporal", "no_spatial", "no_cross", "no_micro"];
