use serde::{Deserialize, Serialize};

use super::{FrameGrid, FEATURE_NAMES, N_FEATURES};
use crate::grid;
use crate::{Error, Result};

pub const MACRO_DIM: usize = 2;
pub const MICRO_DIM: usize = 7;

/// Position of one sliding window: `H` inputs from `start`, then `F` targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub day: i64,
    pub day_pos: usize,
    pub start: usize,
}

/// Stride-1 windows within each day of the grid.
pub fn build_windows(grid: &FrameGrid, h: usize, f: usize) -> Vec<WindowRef> {
    let steps = grid.steps_per_day;
    if h == 0 || f == 0 || h + f > steps {
        log::warn!("history {h} + horizon {f} does not fit a {steps}-step day; no windows");
        return Vec::new();
    }
    let per_day = steps - h - f + 1;
    grid.days
        .iter()
        .enumerate()
        .flat_map(|(day_pos, &day)| (0..per_day).map(move |start| WindowRef { day, day_pos, start }))
        .collect()
}

/// Per-feature min and max, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Fit over every frame of the listed day positions.
    pub fn fit(grid: &FrameGrid, day_positions: &[usize]) -> Result<Self> {
        if day_positions.is_empty() {
            return Err(Error::Invalid("cannot fit normalization on zero days".into()));
        }
        let mut min = [f64::INFINITY; N_FEATURES];
        let mut max = [f64::NEG_INFINITY; N_FEATURES];
        let n = grid.n_segments();
        for &d in day_positions {
            let chunk = &grid.frames[d * grid.steps_per_day * n..(d + 1) * grid.steps_per_day * n];
            for fr in chunk {
                for (k, v) in fr.features().into_iter().enumerate() {
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                }
            }
        }
        for k in 0..N_FEATURES {
            if max[k] == min[k] {
                log::warn!("feature {} is constant ({}) over the training split; it will map to 0", FEATURE_NAMES[k], min[k]);
            }
        }
        Ok(Self { names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(), min: min.to_vec(), max: max.to_vec() })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.names.len() == N_FEATURES
            && self.names.iter().zip(FEATURE_NAMES).all(|(a, b)| a == b)
            && self.min.len() == N_FEATURES
            && self.max.len() == N_FEATURES
            && self.min.iter().zip(&self.max).all(|(lo, hi)| lo.is_finite() && hi.is_finite() && hi >= lo);
        if ok {
            Ok(())
        } else {
            Err(Error::Format("normalization stats need finite min <= max for the nine features".into()))
        }
    }

    /// Scaled value, unclipped. Constant features map to 0.
    pub fn normalize(&self, k: usize, x: f64) -> f64 {
        let range = self.max[k] - self.min[k];
        if range > 0.0 {
            (x - self.min[k]) / range
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, k: usize, v: f64) -> f64 {
        self.min[k] + v * (self.max[k] - self.min[k])
    }

    pub fn denormalize_speed(&self, v: f64) -> f64 {
        self.denormalize(0, v)
    }

    pub fn normalize_speed(&self, x: f64) -> f64 {
        self.normalize(0, x)
    }

    /// Factor from normalized speed units to mph.
    pub fn speed_range(&self) -> f64 {
        self.max[0] - self.min[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub below: Vec<u64>,
    pub above: Vec<u64>,
}

impl ClipReport {
    pub fn total(&self) -> u64 {
        self.below.iter().chain(&self.above).sum()
    }
}

/// The frame grid scaled to `[0, 1]`, plus raw speeds for targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGrid {
    pub n_segments: usize,
    pub steps_per_day: usize,
    pub days: Vec<i64>,
    /// `[day, step, segment, feature]`
    pub feats: Vec<f64>,
    /// `[day, step, segment]` in mph
    pub speed_mph: Vec<f64>,
    pub stats: NormStats,
}

impl NormalizedGrid {
    /// Values outside the stats range are clipped and counted.
    pub fn new(grid: &FrameGrid, stats: &NormStats) -> Result<(Self, ClipReport)> {
        stats.validate()?;
        let mut clip = ClipReport { below: vec![0; N_FEATURES], above: vec![0; N_FEATURES] };
        let mut feats = Vec::with_capacity(grid.frames.len() * N_FEATURES);
        let mut speed_mph = Vec::with_capacity(grid.frames.len());
        for fr in &grid.frames {
            speed_mph.push(fr.seg_speed);
            for (k, x) in fr.features().into_iter().enumerate() {
                let v = stats.normalize(k, x);
                if v < 0.0 {
                    clip.below[k] += 1;
                } else if v > 1.0 {
                    clip.above[k] += 1;
                }
                feats.push(v.clamp(0.0, 1.0));
            }
        }
        if clip.total() > 0 {
            log::info!("clipped {} normalized values outside the training range", clip.total());
        }
        let g = Self {
            n_segments: grid.n_segments(),
            steps_per_day: grid.steps_per_day,
            days: grid.days.clone(),
            feats,
            speed_mph,
            stats: stats.clone(),
        };
        Ok((g, clip))
    }

    fn cell(&self, day_pos: usize, step: usize, seg: usize) -> usize {
        (day_pos * self.steps_per_day + step) * self.n_segments + seg
    }

    pub fn features_at(&self, day_pos: usize, step: usize, seg: usize) -> &[f64] {
        let c = self.cell(day_pos, step, seg) * N_FEATURES;
        &self.feats[c..c + N_FEATURES]
    }

    pub fn speed_at(&self, day_pos: usize, step: usize, seg: usize) -> f64 {
        self.speed_mph[self.cell(day_pos, step, seg)]
    }

    pub fn window(&self, w: &WindowRef, h: usize, f: usize) -> FeatureWindow {
        let n = self.n_segments;
        let mut macro_feats = Vec::with_capacity(h * n * MACRO_DIM);
        let mut micro_feats = Vec::with_capacity(h * n * MICRO_DIM);
        for t in 0..h {
            for s in 0..n {
                let x = self.features_at(w.day_pos, w.start + t, s);
                macro_feats.extend_from_slice(&x[..MACRO_DIM]);
                micro_feats.extend_from_slice(&x[MACRO_DIM..]);
            }
        }
        let target_mph = (0..f)
            .flat_map(|t| (0..n).map(move |s| (t, s)))
            .map(|(t, s)| self.speed_at(w.day_pos, w.start + h + t, s))
            .collect();
        let dow = grid::day_of_week(w.day);
        FeatureWindow {
            h,
            f,
            n,
            macro_feats,
            micro_feats,
            target_mph,
            tod_index: (w.start..w.start + h).collect(),
            dow_index: vec![dow; h],
        }
    }
}

/// One model input, materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub h: usize,
    pub f: usize,
    pub n: usize,
    /// `H × N × 2`, normalized
    pub macro_feats: Vec<f64>,
    /// `H × N × 7`, normalized
    pub micro_feats: Vec<f64>,
    /// `F × N` in mph
    pub target_mph: Vec<f64>,
    pub tod_index: Vec<usize>,
    pub dow_index: Vec<usize>,
}
