//! Per-segment, per-interval macro and micro features.
//!
//! Macro: segment speed and CV volume. Micro: speed volatility plus counts of
//! hard / medium / light accelerations and brakings.

mod window;

pub use window::{
    build_windows, ClipReport, FeatureWindow, NormStats, NormalizedGrid, WindowRef, MACRO_DIM, MICRO_DIM,
};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::grid::{self, STEPS_PER_DAY};
use crate::ingest::{SegmentIndex, Trajectory};
use crate::{Error, Result};

pub const MPH_TO_MPS: f64 = 0.44704;

pub const HARD_ACC_MPS2: f64 = 0.89;
pub const HARD_BRK_MPS2: f64 = 1.19;
pub const MEDIUM_MPS2: f64 = 0.45;

/// The nine model features, macro first.
pub const FEATURE_NAMES: [&str; 9] = [
    "seg_speed",
    "cv_volume",
    "cv_sv",
    "f_hard_acc",
    "f_med_acc",
    "f_light_acc",
    "f_hard_brk",
    "f_med_brk",
    "f_light_brk",
];
pub const N_FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Behavior {
    HardAcc,
    MedAcc,
    LightAcc,
    HardBrk,
    MedBrk,
    LightBrk,
}

impl Behavior {
    pub const ALL: [Behavior; 6] =
        [Behavior::HardAcc, Behavior::MedAcc, Behavior::LightAcc, Behavior::HardBrk, Behavior::MedBrk, Behavior::LightBrk];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Classify one speed change. `None` when `dt_s <= 0`.
///
/// Hard is strictly above its cutoff, medium is `[0.45, cutoff]`, light is
/// below 0.45. A zero change is a light acceleration.
pub fn classify_acceleration(dv_mph: f64, dt_s: f64) -> Option<Behavior> {
    if dt_s <= 0.0 {
        return None;
    }
    let acc = dv_mph * MPH_TO_MPS / dt_s;
    let mag = acc.abs();
    Some(if acc >= 0.0 {
        if mag > HARD_ACC_MPS2 {
            Behavior::HardAcc
        } else if mag >= MEDIUM_MPS2 {
            Behavior::MedAcc
        } else {
            Behavior::LightAcc
        }
    } else if mag > HARD_BRK_MPS2 {
        Behavior::HardBrk
    } else if mag >= MEDIUM_MPS2 {
        Behavior::MedBrk
    } else {
        Behavior::LightBrk
    })
}

/// Event counts for every consecutive pair of a trajectory, in
/// [`Behavior::ALL`] order.
pub fn classify_accelerations(traj: &Trajectory) -> [u32; 6] {
    let mut counts = [0; 6];
    for w in traj.points.windows(2) {
        let dt = (w[1].timestamp - w[0].timestamp) as f64;
        if let Some(b) = classify_acceleration(w[1].speed_mph - w[0].speed_mph, dt) {
            counts[b.index()] += 1;
        }
    }
    counts
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). Needs two or more values.
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean over journeys with at least two speeds of each journey's sample std.
pub fn speed_volatility<S: AsRef<[f64]>>(journeys: &[S]) -> f64 {
    let (sum, n) = journeys
        .iter()
        .map(AsRef::as_ref)
        .filter(|s| s.len() >= 2)
        .fold((0.0, 0usize), |(sum, n), s| (sum + sample_std(s), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFrame {
    pub segment_id: String,
    pub interval_start: i64,
    pub seg_speed: f64,
    pub cv_volume: u32,
    pub cv_sv: f64,
    pub f_hard_acc: u32,
    pub f_med_acc: u32,
    pub f_light_acc: u32,
    pub f_hard_brk: u32,
    pub f_med_brk: u32,
    pub f_light_brk: u32,
    pub is_imputed: bool,
}

impl SegmentFrame {
    pub fn imputed(segment_id: &str, interval_start: i64, speed: f64) -> Self {
        Self {
            segment_id: segment_id.to_string(),
            interval_start,
            seg_speed: speed,
            cv_volume: 0,
            cv_sv: 0.0,
            f_hard_acc: 0,
            f_med_acc: 0,
            f_light_acc: 0,
            f_hard_brk: 0,
            f_med_brk: 0,
            f_light_brk: 0,
            is_imputed: true,
        }
    }

    pub fn counts(&self) -> [u32; 6] {
        [self.f_hard_acc, self.f_med_acc, self.f_light_acc, self.f_hard_brk, self.f_med_brk, self.f_light_brk]
    }

    pub fn set_counts(&mut self, c: [u32; 6]) {
        [self.f_hard_acc, self.f_med_acc, self.f_light_acc, self.f_hard_brk, self.f_med_brk, self.f_light_brk] = c;
    }

    /// The nine features in [`FEATURE_NAMES`] order.
    pub fn features(&self) -> [f64; N_FEATURES] {
        let c = self.counts();
        [
            self.seg_speed,
            self.cv_volume as f64,
            self.cv_sv,
            c[0] as f64,
            c[1] as f64,
            c[2] as f64,
            c[3] as f64,
            c[4] as f64,
            c[5] as f64,
        ]
    }
}

/// One journey's contribution to a segment-interval cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JourneySample {
    pub speeds: Vec<f64>,
    pub events: [u32; 6],
}

/// Aggregate the journeys seen in one segment-interval.
///
/// With no journeys the frame is imputed from `prev_speed`.
pub fn aggregate_interval(segment_id: &str, interval_start: i64, journeys: &[JourneySample], prev_speed: f64) -> SegmentFrame {
    let present: Vec<&JourneySample> = journeys.iter().filter(|j| !j.speeds.is_empty()).collect();
    if present.is_empty() {
        return SegmentFrame::imputed(segment_id, interval_start, prev_speed);
    }
    let seg_speed = present.iter().map(|j| mean(&j.speeds)).sum::<f64>() / present.len() as f64;
    let speeds: Vec<&[f64]> = present.iter().map(|j| j.speeds.as_slice()).collect();
    let mut counts = [0; 6];
    for j in &present {
        for (c, e) in counts.iter_mut().zip(j.events) {
            *c += e;
        }
    }
    let mut f = SegmentFrame {
        segment_id: segment_id.to_string(),
        interval_start,
        seg_speed,
        cv_volume: present.len() as u32,
        cv_sv: speed_volatility(&speeds),
        is_imputed: false,
        ..SegmentFrame::imputed(segment_id, interval_start, 0.0)
    };
    f.set_counts(counts);
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub steps_per_day: usize,
    pub free_flow_mph: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { steps_per_day: STEPS_PER_DAY, free_flow_mph: 65.0 }
    }
}

/// A complete day × interval × segment frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    pub segment_ids: Vec<String>,
    pub steps_per_day: usize,
    pub days: Vec<i64>,
    /// Day-major, then interval, then segment.
    pub frames: Vec<SegmentFrame>,
}

impl FrameGrid {
    pub fn n_segments(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn frame(&self, day_pos: usize, interval: usize, seg: usize) -> &SegmentFrame {
        &self.frames[(day_pos * self.steps_per_day + interval) * self.n_segments() + seg]
    }

    /// Assemble a grid from loose frames. Days missing any cell are skipped.
    pub fn from_frames(segment_ids: Vec<String>, steps_per_day: usize, frames: Vec<SegmentFrame>) -> Result<Self> {
        let seg_pos: HashMap<&str, usize> = segment_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let n = segment_ids.len();
        let mut by_day: BTreeMap<i64, Vec<Option<SegmentFrame>>> = BTreeMap::new();
        for f in frames {
            let Some(&s) = seg_pos.get(f.segment_id.as_str()) else {
                return Err(Error::Invalid(format!("frame for unknown segment {:?}", f.segment_id)));
            };
            let Some((day, idx)) = grid::interval_of(f.interval_start, steps_per_day) else {
                return Err(Error::Invalid(format!("frame at {} is off the interval grid", f.interval_start)));
            };
            if grid::interval_start(day, idx) != f.interval_start {
                return Err(Error::Invalid(format!("frame at {} is not 5-minute aligned", f.interval_start)));
            }
            let cells = by_day.entry(day).or_insert_with(|| vec![None; steps_per_day * n]);
            cells[idx * n + s] = Some(f);
        }
        let mut days = Vec::new();
        let mut out = Vec::new();
        for (day, cells) in by_day {
            let filled = cells.iter().filter(|c| c.is_some()).count();
            if filled < cells.len() {
                log::warn!("day {} has {filled} of {} frames; skipped", grid::date_of_day(day), cells.len());
                continue;
            }
            days.push(day);
            out.extend(cells.into_iter().flatten());
        }
        Ok(Self { segment_ids, steps_per_day, days, frames: out })
    }
}

#[derive(Debug, Default)]
struct CellJourney {
    speeds: Vec<f64>,
    events: [u32; 6],
}

/// Compute the frame grid for all days touched by in-grid points.
///
/// An acceleration event between points `j-1` and `j` belongs to the cell of
/// point `j`. Pairs are taken over the full cleaned trajectory, so the first
/// point in a cell may carry an event from a pair that started upstream.
pub fn extract_frames(trajs: &[Trajectory], index: &SegmentIndex, cfg: &ExtractConfig) -> Result<FrameGrid> {
    if index.is_empty() {
        return Err(Error::SegmentIndex("segment index is empty".into()));
    }
    let n = index.len();
    let steps = cfg.steps_per_day;
    let mut order: Vec<&Trajectory> = trajs.iter().collect();
    order.sort_by(|a, b| a.journey_id.cmp(&b.journey_id));

    // (day, interval, seg) -> per-journey samples, journeys in id order
    let mut cells: BTreeMap<(i64, usize, usize), Vec<JourneySample>> = BTreeMap::new();
    for traj in order {
        let mut mine: BTreeMap<(i64, usize, usize), CellJourney> = BTreeMap::new();
        for (j, p) in traj.points.iter().enumerate() {
            let Some(seg) = index.locate(p.chainage_mi, p.heading_deg) else { continue };
            let Some((day, idx)) = grid::interval_of(p.timestamp, steps) else { continue };
            let cell = mine.entry((day, idx, seg)).or_default();
            cell.speeds.push(p.speed_mph);
            if j > 0 {
                let q = &traj.points[j - 1];
                if let Some(b) = classify_acceleration(p.speed_mph - q.speed_mph, (p.timestamp - q.timestamp) as f64) {
                    cell.events[b.index()] += 1;
                }
            }
        }
        for (key, c) in mine {
            cells.entry(key).or_default().push(JourneySample { speeds: c.speeds, events: c.events });
        }
    }

    let days: Vec<i64> = {
        let mut d: Vec<i64> = cells.keys().map(|k| k.0).collect();
        d.dedup();
        d
    };
    let segment_ids: Vec<String> = index.segments().iter().map(|s| s.segment_id.clone()).collect();
    let mut frames = Vec::with_capacity(days.len() * steps * n);
    let empty: Vec<JourneySample> = Vec::new();
    for &day in &days {
        let mut prev = vec![cfg.free_flow_mph; n];
        for idx in 0..steps {
            let start = grid::interval_start(day, idx);
            for seg in 0..n {
                let js = cells.get(&(day, idx, seg)).unwrap_or(&empty);
                let f = aggregate_interval(&segment_ids[seg], start, js, prev[seg]);
                prev[seg] = f.seg_speed;
                frames.push(f);
            }
        }
    }
    Ok(FrameGrid { segment_ids, steps_per_day: steps, days, frames })
}
