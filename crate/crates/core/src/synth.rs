//! Synthetic corridor with upstream-moving congestion waves.
//!
//! Vehicles enter at chainage 0 and drive northbound. Each vehicle tracks the
//! cell speed field with a first-order lag plus AR(1) noise. Hard-braking
//! dips occur at a baseline rate everywhere, with extra dips injected in the
//! `lead` intervals before a wave front reaches a segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::features::{extract_frames, ExtractConfig, FrameGrid};
use crate::grid::{self, INTERVAL_SECS, STEPS_PER_DAY};
use crate::ingest::{group_and_clean, CVPoint, CleaningConfig, SegmentIndex};
use crate::model::splitmix;
use crate::{Error, Result};

const POINT_SPACING_S: i64 = 3;
const MIN_FIELD_MPH: f64 = 8.0;
const MIN_VEHICLE_MPH: f64 = 0.5;

/// One congestion wave. Its front reaches segment `j <= origin_segment` at
/// `start_interval + ceil((origin_segment - j) / propagation)` and holds for
/// `duration` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    /// Zero-based day of the scenario.
    pub day: usize,
    pub start_interval: usize,
    pub origin_segment: usize,
    pub duration: usize,
    /// Fractional speed reduction at the core, in (0, 1].
    pub severity: f64,
    /// Segments per interval.
    pub propagation: f64,
}

impl Wave {
    /// Interval at which the front reaches `seg`, if it ever does.
    pub fn front(&self, seg: usize) -> Option<usize> {
        if seg > self.origin_segment {
            return None;
        }
        let lag = ((self.origin_segment - seg) as f64 / self.propagation).ceil();
        Some(self.start_interval.saturating_add(lag as usize))
    }

    pub fn is_active(&self, step: usize, seg: usize) -> bool {
        self.front(seg).is_some_and(|f| step >= f && step < f.saturating_add(self.duration))
    }

    pub fn in_lead(&self, step: usize, seg: usize, lead: usize) -> bool {
        self.front(seg).is_some_and(|f| step < f && step + lead >= f)
    }
}

/// Waves drawn per day from the scenario seed, on top of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomWaves {
    pub per_day: usize,
    pub duration: [usize; 2],
    pub severity: [f64; 2],
    pub propagation: [f64; 2],
}

impl Default for RandomWaves {
    fn default() -> Self {
        Self { per_day: 0, duration: [4, 10], severity: [0.3, 0.7], propagation: [0.5, 1.5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_segments: usize,
    pub segment_length_mi: f64,
    /// First day, `YYYY-MM-DD`.
    pub start_date: String,
    pub n_days: usize,
    pub free_flow_mph: f64,
    pub waves: Vec<Wave>,
    pub random_waves: RandomWaves,
    /// Mean vehicles entering the corridor per interval (Poisson).
    pub arrivals_per_interval: f64,
    pub lead: usize,
    /// Per-point hard-brake probability outside lead windows.
    pub baseline_hard_brake_rate: f64,
    /// Extra hard-brake rate inside lead windows, as a multiple of the
    /// baseline rate. The lead-window rate is `baseline * (1 + factor)`.
    pub precursor_factor: f64,
    /// Per-cell Gaussian noise on the speed field, mph.
    pub field_noise_mph: f64,
    /// Innovation scale of each vehicle's AR(1) speed noise, mph.
    pub vehicle_noise_mph: f64,
    pub vehicle_noise_ar: f64,
    /// Fraction of the gap to the field speed closed each 3 s step.
    pub speed_lag: f64,
    /// Speed drop of an injected hard brake, mph, drawn uniformly.
    pub brake_drop_mph: [f64; 2],
    /// Fraction of a brake dip that remains after each step.
    pub brake_recovery: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_segments: 20,
            segment_length_mi: 0.4,
            start_date: "2023-03-06".into(),
            n_days: 1,
            free_flow_mph: 65.0,
            waves: Vec::new(),
            random_waves: RandomWaves::default(),
            arrivals_per_interval: 4.0,
            lead: 2,
            baseline_hard_brake_rate: 0.003,
            precursor_factor: 10.0,
            field_noise_mph: 0.5,
            vehicle_noise_mph: 0.4,
            vehicle_noise_ar: 0.9,
            speed_lag: 0.35,
            brake_drop_mph: [10.0, 14.0],
            brake_recovery: 0.6,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        grid::parse_day(&self.start_date)?;
        if self.n_segments == 0 || self.n_segments > 10_000 || self.n_days == 0 || self.n_days > 3660 {
            return bad("n_segments and n_days must be positive and bounded".into());
        }
        if !(self.segment_length_mi > 0.0 && self.segment_length_mi.is_finite()) {
            return bad("segment_length_mi must be positive".into());
        }
        if !(self.free_flow_mph > MIN_FIELD_MPH && self.free_flow_mph < crate::ingest::SPEED_CAP_MPH - 20.0) {
            return bad(format!("free_flow_mph {} outside ({MIN_FIELD_MPH}, 100)", self.free_flow_mph));
        }
        if !(self.arrivals_per_interval >= 0.0 && self.arrivals_per_interval <= 1000.0) {
            return bad("arrivals_per_interval must be in [0, 1000]".into());
        }
        if !(0.0..=1.0).contains(&self.baseline_hard_brake_rate)
            || !(self.precursor_factor >= 0.0 && self.baseline_hard_brake_rate * (1.0 + self.precursor_factor) <= 1.0)
        {
            return bad("hard-brake rates must stay in [0, 1] with a non-negative precursor_factor".into());
        }
        let nonneg = [self.field_noise_mph, self.vehicle_noise_mph];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise scales must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.vehicle_noise_ar)
            || !(self.speed_lag > 0.0 && self.speed_lag <= 1.0)
            || !(0.0..1.0).contains(&self.brake_recovery)
        {
            return bad("vehicle_noise_ar and brake_recovery must be in [0, 1), speed_lag in (0, 1]".into());
        }
        let [lo, hi] = self.brake_drop_mph;
        if !(lo > 0.0 && lo <= hi && hi < self.free_flow_mph) {
            return bad("brake_drop_mph must be an increasing positive range below free flow".into());
        }
        for (i, w) in self.waves.iter().enumerate() {
            self.validate_wave(w).map_err(|e| Error::Config(format!("wave {i}: {e}")))?;
        }
        let r = &self.random_waves;
        if r.per_day > 0 {
            let ok = r.duration[0] >= 1
                && r.duration[0] <= r.duration[1]
                && r.severity[0] > 0.0
                && r.severity[0] <= r.severity[1]
                && r.severity[1] <= 1.0
                && r.propagation[0] > 0.0
                && r.propagation[0] <= r.propagation[1]
                && r.propagation[1].is_finite()
                && r.per_day <= 1000;
            if !ok {
                return bad("random_waves ranges must be increasing; severity in (0, 1], propagation positive".into());
            }
        }
        Ok(())
    }

    fn validate_wave(&self, w: &Wave) -> std::result::Result<(), String> {
        if w.day >= self.n_days {
            return Err(format!("day {} beyond n_days {}", w.day, self.n_days));
        }
        if w.origin_segment >= self.n_segments {
            return Err(format!("origin segment {} >= n_segments {}", w.origin_segment, self.n_segments));
        }
        if !(w.severity > 0.0 && w.severity <= 1.0) {
            return Err(format!("severity {} outside (0, 1]", w.severity));
        }
        if !(w.propagation > 0.0 && w.propagation.is_finite()) {
            return Err("propagation must be positive".into());
        }
        if w.start_interval >= STEPS_PER_DAY || w.duration == 0 {
            return Err("start_interval must be within the day and duration positive".into());
        }
        Ok(())
    }

    pub fn corridor_length_mi(&self) -> f64 {
        self.n_segments as f64 * self.segment_length_mi
    }
}

/// Latent truth behind a generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub n_segments: usize,
    pub steps_per_day: usize,
    /// All waves, scheduled and random, that were simulated.
    pub waves: Vec<Wave>,
    /// Cell speed field `[day, step, segment]`, mph.
    pub speed_field: Vec<f64>,
    /// Cells in a lead window and not inside any wave.
    pub lead_mask: Vec<bool>,
    /// Cells inside a wave.
    pub wave_mask: Vec<bool>,
}

impl GroundTruth {
    pub fn cell(&self, day: usize, step: usize, seg: usize) -> usize {
        (day * self.steps_per_day + step) * self.n_segments + seg
    }

    pub fn field(&self, day: usize, step: usize, seg: usize) -> f64 {
        self.speed_field[self.cell(day, step, seg)]
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub points: Vec<CVPoint>,
    pub segments: SegmentIndex,
    /// Frames the feature pipeline computes from `points`.
    pub frames: FrameGrid,
    pub truth: GroundTruth,
}

fn day_rng(seed: u64, day: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(((day as u64) << 8) | stream)))
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

fn day_waves(cfg: &ScenarioConfig, day: usize) -> Vec<Wave> {
    let mut waves: Vec<Wave> = cfg.waves.iter().filter(|w| w.day == day).cloned().collect();
    let r = &cfg.random_waves;
    let mut rng = day_rng(cfg.seed, day, 1);
    for _ in 0..r.per_day {
        waves.push(Wave {
            day,
            start_interval: rng.random_range(0..STEPS_PER_DAY),
            origin_segment: rng.random_range(0..cfg.n_segments),
            duration: rng.random_range(r.duration[0]..=r.duration[1]),
            severity: uniform(&mut rng, r.severity),
            propagation: uniform(&mut rng, r.propagation),
        });
    }
    waves
}

struct DayField {
    speed: Vec<f64>,
    lead: Vec<bool>,
    active: Vec<bool>,
}

fn day_field(cfg: &ScenarioConfig, day: usize, waves: &[Wave]) -> Result<DayField> {
    let n = cfg.n_segments;
    let cells = STEPS_PER_DAY * n;
    let mut rng = day_rng(cfg.seed, day, 2);
    let noise = Normal::new(0.0, cfg.field_noise_mph).map_err(|e| Error::Config(e.to_string()))?;
    let mut speed = vec![0.0; cells];
    let mut lead = vec![false; cells];
    let mut active = vec![false; cells];
    for step in 0..STEPS_PER_DAY {
        for seg in 0..n {
            let c = step * n + seg;
            let sev = waves.iter().filter(|w| w.is_active(step, seg)).map(|w| w.severity).fold(0.0, f64::max);
            active[c] = sev > 0.0;
            lead[c] = !active[c] && waves.iter().any(|w| w.in_lead(step, seg, cfg.lead));
            let v = cfg.free_flow_mph * (1.0 - sev) + noise.sample(&mut rng);
            speed[c] = v.max(MIN_FIELD_MPH);
        }
    }
    Ok(DayField { speed, lead, active })
}

fn simulate_day(cfg: &ScenarioConfig, day: usize, day_id: i64, f: &DayField) -> Result<Vec<CVPoint>> {
    let n = cfg.n_segments;
    let mut rng = day_rng(cfg.seed, day, 3);
    let arrivals = if cfg.arrivals_per_interval > 0.0 {
        Some(Poisson::new(cfg.arrivals_per_interval).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let innov = Normal::new(0.0, cfg.vehicle_noise_mph).map_err(|e| Error::Config(e.to_string()))?;
    let stationary_sd = cfg.vehicle_noise_mph / (1.0 - cfg.vehicle_noise_ar * cfg.vehicle_noise_ar).sqrt();
    let init = Normal::new(0.0, stationary_sd).map_err(|e| Error::Config(e.to_string()))?;
    let date = grid::date_of_day(day_id);
    let day_end = grid::interval_start(day_id, 0) + (STEPS_PER_DAY as i64) * INTERVAL_SECS;
    let length = cfg.corridor_length_mi();
    let cell_of = |t: i64, x: f64| -> usize {
        let step = ((t - grid::interval_start(day_id, 0)) / INTERVAL_SECS) as usize;
        let seg = ((x / cfg.segment_length_mi) as usize).min(n - 1);
        step * n + seg
    };

    let mut points = Vec::new();
    let mut vehicle = 0usize;
    for k in 0..STEPS_PER_DAY {
        let count = arrivals.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut entries: Vec<i64> = (0..count).map(|_| rng.random_range(0..INTERVAL_SECS)).collect();
        entries.sort_unstable();
        for offset in entries {
            let id = format!("{date}-{vehicle:05}");
            vehicle += 1;
            let mut t = grid::interval_start(day_id, k) + offset;
            let mut x = 0.0;
            let mut base = f.speed[cell_of(t, x)];
            let mut e = init.sample(&mut rng);
            let mut dip = 0.0f64;
            loop {
                let speed = (base + e - dip).clamp(MIN_VEHICLE_MPH, crate::ingest::SPEED_CAP_MPH - 1.0);
                points.push(CVPoint { journey_id: id.clone(), timestamp: t, chainage_mi: x, heading_deg: 0.0, speed_mph: speed });
                t += POINT_SPACING_S;
                x += speed * POINT_SPACING_S as f64 / 3600.0;
                if x >= length || t >= day_end {
                    break;
                }
                let c = cell_of(t, x);
                base += cfg.speed_lag * (f.speed[c] - base);
                e = cfg.vehicle_noise_ar * e + innov.sample(&mut rng);
                dip *= cfg.brake_recovery;
                let rate = if f.lead[c] {
                    cfg.baseline_hard_brake_rate * (1.0 + cfg.precursor_factor)
                } else {
                    cfg.baseline_hard_brake_rate
                };
                if dip < 1.0 && rng.random::<f64>() < rate {
                    dip += uniform(&mut rng, cfg.brake_drop_mph);
                }
            }
        }
    }
    Ok(points)
}

/// Simulate the scenario and run the feature pipeline on the result.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let first = grid::parse_day(&cfg.start_date)?;
    let n = cfg.n_segments;
    let per_day: Vec<Result<(Vec<Wave>, DayField, Vec<CVPoint>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.n_days)
            .map(|d| {
                s.spawn(move || {
                    let waves = day_waves(cfg, d);
                    let field = day_field(cfg, d, &waves)?;
                    let pts = simulate_day(cfg, d, first + d as i64, &field)?;
                    Ok((waves, field, pts))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario worker panicked")).collect()
    });

    let mut truth = GroundTruth {
        n_segments: n,
        steps_per_day: STEPS_PER_DAY,
        waves: Vec::new(),
        speed_field: Vec::with_capacity(cfg.n_days * STEPS_PER_DAY * n),
        lead_mask: Vec::new(),
        wave_mask: Vec::new(),
    };
    let mut points = Vec::new();
    for r in per_day {
        let (waves, field, pts) = r?;
        truth.waves.extend(waves);
        truth.speed_field.extend(field.speed);
        truth.lead_mask.extend(field.lead);
        truth.wave_mask.extend(field.active);
        points.extend(pts);
    }

    let segments = SegmentIndex::uniform(n, cfg.segment_length_mi, "NB")?;
    let trajs = group_and_clean(points.clone(), &CleaningConfig::default());
    let frames = extract_frames(&trajs, &segments, &ExtractConfig { steps_per_day: STEPS_PER_DAY, free_flow_mph: cfg.free_flow_mph })?;
    Ok(Scenario { points, segments, frames, truth })
}
