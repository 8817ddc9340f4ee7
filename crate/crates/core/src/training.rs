//! Adam, early stopping, date-based splits and grid sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use numcore::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{NormalizedGrid, WindowRef};
use crate::model::{splitmix, Batch, Mode, Model};
use crate::objective::t_nll;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            validation_fraction: 0.10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.early_stop_patience > self.max_epochs {
            return bad("early_stop_patience exceeds max_epochs");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || self.adam_eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter on a strictly decreasing monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<WindowRef>,
    pub validation: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
}

/// Assign windows by the date of their first input interval.
///
/// Validation is the trailing `validation_fraction` of the training-date
/// windows in time order. Windows on neither date list are dropped.
pub fn split_by_date(windows: &[WindowRef], train_days: &[i64], test_days: &[i64], validation_fraction: f64) -> Result<Split> {
    let train_set: BTreeSet<i64> = train_days.iter().copied().collect();
    let test_set: BTreeSet<i64> = test_days.iter().copied().collect();
    if let Some(d) = train_set.intersection(&test_set).next() {
        return Err(Error::Invalid(format!("date {} is in both train and test sets", crate::grid::date_of_day(*d))));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Invalid(format!("validation_fraction {validation_fraction} outside (0, 1)")));
    }
    let mut pool = Vec::new();
    let mut test = Vec::new();
    let mut excluded = 0usize;
    for w in windows {
        if train_set.contains(&w.day) {
            pool.push(*w);
        } else if test_set.contains(&w.day) {
            test.push(*w);
        } else {
            excluded += 1;
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} windows fall on dates in neither split and were excluded");
    }
    pool.sort_by_key(|w| (w.day, w.start));
    test.sort_by_key(|w| (w.day, w.start));
    let n_val = ((pool.len() as f64) * validation_fraction).round() as usize;
    let n_val = if pool.len() >= 2 { n_val.clamp(1, pool.len() - 1) } else { 0 };
    let validation = pool.split_off(pool.len() - n_val);
    Ok(Split { train: pool, validation, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub param_count: usize,
    #[serde(default)]
    pub test_metrics: Option<String>,
}

impl RunRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// One JSON object per epoch, then a summary line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "summary": {
                "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss,
                "stopped_early": self.stopped_early,
                "param_count": self.param_count,
                "test_metrics": self.test_metrics,
            }
        });
        serde_json::to_writer(&mut out, &summary)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Order in which training windows are visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch as u64)));
    idx.shuffle(&mut rng);
    idx
}

/// Mean t-NLL of the model over `windows`, evaluation mode.
pub fn evaluate_loss(model: &Model, grid: &NormalizedGrid, windows: &[WindowRef], batch_size: usize) -> Result<f64> {
    let c = &model.config;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = Batch::gather(grid, chunk, c.history, c.horizon)?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &p, &batch, Mode::EVAL)?;
        let y = tape.constant(batch.target.clone());
        let loss = t_nll(&mut tape, out.mean, out.scale2, out.df, y)?;
        total += tape.value(loss).item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// One optimization step on `windows`; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut Adam, grid: &NormalizedGrid, windows: &[WindowRef], clip: Option<f64>, dropout_seed: u64) -> Result<f64> {
    let c = model.config.clone();
    let batch = Batch::gather(grid, windows, c.history, c.horizon)?;
    let mut tape = Tape::new();
    let (loss_value, mut grads) = {
        let p = model.bind(&mut tape, true);
        let out = model.forward(&mut tape, &p, &batch, Mode { train: true, seed: dropout_seed, capture_scores: false })?;
        let y = tape.constant(batch.target.clone());
        let loss = t_nll(&mut tape, out.mean, out.scale2, out.df, y)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Ok(lv);
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = p.vars.iter().zip(&model.params.tensors).map(|(&v, t)| g.get_or_zeros(v, t.shape())).collect();
        (lv, grads)
    };
    if let Some(max) = clip {
        clip_global_norm(&mut grads, max);
    }
    opt.step(&mut model.params.tensors, &grads);
    Ok(loss_value)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub model: Model,
    pub record: RunRecord,
}

/// Adam on t-NLL with early stopping on validation t-NLL.
pub fn train(initial: &Model, grid: &NormalizedGrid, train_windows: &[WindowRef], val_windows: &[WindowRef], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Invalid(format!(
            "need training and validation windows, got {} and {}",
            train_windows.len(),
            val_windows.len()
        )));
    }
    let mut model = initial.clone();
    let mut opt = Adam::from_config(cfg);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = model.clone();
    let mut record = RunRecord { param_count: model.param_count(), ..Default::default() };
    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let order = epoch_order(train_windows.len(), cfg.seed, epoch);
        let (mut sum, mut seen) = (0.0, 0usize);
        let mut picked = Vec::with_capacity(cfg.batch_size);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            picked.clear();
            picked.extend(chunk.iter().map(|&i| train_windows[i]));
            let seed = splitmix(cfg.seed ^ splitmix(((epoch as u64) << 32) | bi as u64));
            let loss = train_step(&mut model, &mut opt, grid, &picked, cfg.grad_clip, seed)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} at epoch {epoch}, batch {bi}")));
            }
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_loss = evaluate_loss(&model, grid, val_windows, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {:.5} val {:.5}", sum / seen as f64, val_loss);
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                record.stopped_early = true;
                break;
            }
        }
    }
    record.best_epoch = stopper.best_epoch;
    record.best_val_loss = stopper.best;
    Ok(TrainOutcome { model: best, record })
}

/// One point of a sweep: the dotted-key assignment and its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub assignment: BTreeMap<String, serde_json::Value>,
    pub record: RunRecord,
}

/// Set a dotted path such as `train.learning_rate` inside a JSON object.
pub fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("sweep key {path}: {part} is not inside a table")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

/// Every combination of the grid values, in key order then value order.
pub fn grid_points(grid: &BTreeMap<String, Vec<serde_json::Value>>) -> Result<Vec<BTreeMap<String, serde_json::Value>>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut points = vec![BTreeMap::new()];
    for (k, vals) in grid {
        if vals.is_empty() {
            return Err(Error::Config(format!("sweep key {k} has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(k.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Run every grid point and rank by best validation loss (stable on ties).
pub fn sweep<F>(grid: &BTreeMap<String, Vec<serde_json::Value>>, base: &serde_json::Value, mut run: F) -> Result<Vec<SweepRun>>
where
    F: FnMut(&serde_json::Value) -> Result<RunRecord>,
{
    let mut runs = Vec::new();
    for assignment in grid_points(grid)? {
        let mut cfg = base.clone();
        for (k, v) in &assignment {
            set_path(&mut cfg, k, v.clone())?;
        }
        let record = run(&cfg)?;
        runs.push(SweepRun { assignment, record });
    }
    runs.sort_by(|a, b| a.record.best_val_loss.total_cmp(&b.record.best_val_loss));
    Ok(runs)
}
