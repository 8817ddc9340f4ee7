//! Brute-force recomputation of segment frames from raw points.

use std::collections::BTreeSet;

use mmca::features::{FrameGrid, SegmentFrame};
use mmca::ingest::{group_and_clean, CVPoint, CleaningConfig, SegmentIndex, Trajectory};
use mmca::synth::{generate, ScenarioConfig, Wave};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DAY: i64 = 86_400;
const START: i64 = 6 * 3600;

/// 100 journeys over an 8-segment corridor, with extra jitter so that every
/// behavior class occurs, plus a few points outside the corridor and the day.
pub fn sample() -> (Vec<Trajectory>, SegmentIndex) {
    let cfg = ScenarioConfig {
        n_segments: 8,
        arrivals_per_interval: 0.6,
        waves: vec![Wave { day: 0, start_interval: 40, origin_segment: 6, duration: 20, severity: 0.7, propagation: 0.5 }],
        seed: 42,
        ..Default::default()
    };
    let sc = generate(&cfg).unwrap();
    let ids: BTreeSet<String> = sc.points.iter().map(|p| p.journey_id.clone()).collect();
    assert!(ids.len() >= 100, "only {} journeys", ids.len());
    let keep: BTreeSet<&String> = ids.iter().take(100).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pts: Vec<CVPoint> = sc.points.iter().filter(|p| keep.contains(&p.journey_id)).cloned().collect();
    for p in &mut pts {
        p.speed_mph = (p.speed_mph + rng.random_range(-6.0..6.0)).max(0.0);
        if rng.random::<f64>() < 0.01 {
            p.chainage_mi += 10.0;
        }
        if rng.random::<f64>() < 0.005 {
            p.timestamp += 20 * 3600;
        }
    }
    let trajs = group_and_clean(pts, &CleaningConfig::default());
    assert_eq!(trajs.len(), 100);
    (trajs, sc.segments)
}

pub fn class(dv_mph: f64, dt: f64) -> usize {
    let a = dv_mph * 0.44704 / dt;
    match a {
        a if a > 0.89 => 0,
        a if a >= 0.45 => 1,
        a if a >= 0.0 => 2,
        a if a < -1.19 => 3,
        a if a <= -0.45 => 4,
        _ => 5,
    }
}

/// Recompute one cell by scanning every point of every journey.
pub fn brute_cell(trajs: &[Trajectory], index: &SegmentIndex, day: i64, interval: usize, seg: usize, prev: f64) -> SegmentFrame {
    let s = &index.segments()[seg];
    let t0 = day * DAY + START + interval as i64 * 300;
    let inside = |p: &CVPoint| p.chainage_mi >= s.start_mi && p.chainage_mi < s.end_mi && p.timestamp >= t0 && p.timestamp < t0 + 300;
    let mut journey_means = Vec::new();
    let mut stds = Vec::new();
    let mut counts = [0u32; 6];
    for tr in trajs {
        let speeds: Vec<f64> = tr.points.iter().filter(|p| inside(p)).map(|p| p.speed_mph).collect();
        if speeds.is_empty() {
            continue;
        }
        let m = speeds.iter().sum::<f64>() / speeds.len() as f64;
        journey_means.push(m);
        if speeds.len() >= 2 {
            let v = speeds.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (speeds.len() - 1) as f64;
            stds.push(v.sqrt());
        }
        for k in 1..tr.points.len() {
            let (a, b) = (&tr.points[k - 1], &tr.points[k]);
            if inside(b) {
                counts[class(b.speed_mph - a.speed_mph, (b.timestamp - a.timestamp) as f64)] += 1;
            }
        }
    }
    if journey_means.is_empty() {
        return SegmentFrame::imputed(&s.segment_id, t0, prev);
    }
    let mut f = SegmentFrame::imputed(&s.segment_id, t0, journey_means.iter().sum::<f64>() / journey_means.len() as f64);
    f.is_imputed = false;
    f.cv_volume = journey_means.len() as u32;
    f.cv_sv = if stds.is_empty() { 0.0 } else { stds.iter().sum::<f64>() / stds.len() as f64 };
    f.set_counts(counts);
    f
}


#[derive(Debug, Default)]
pub struct Comparison {
    pub cells: usize,
    pub exact_mismatches: usize,
    pub max_real_diff: f64,
    pub seen: [u32; 6],
    pub days_match: bool,
}

/// Compare every pipeline cell against [`brute_cell`].
pub fn compare(trajs: &[Trajectory], index: &SegmentIndex, grid: &FrameGrid) -> Comparison {
    let days: BTreeSet<i64> = trajs
        .iter()
        .flat_map(|t| &t.points)
        .filter(|p| {
            let sod = p.timestamp.rem_euclid(DAY);
            (START..START + 192 * 300).contains(&sod) && p.chainage_mi >= 0.0 && p.chainage_mi < index.segments().last().unwrap().end_mi
        })
        .map(|p| p.timestamp.div_euclid(DAY))
        .collect();
    let mut c = Comparison { days_match: grid.days == days.iter().copied().collect::<Vec<_>>(), ..Default::default() };
    for (dp, &day) in grid.days.iter().enumerate() {
        let mut prev = vec![65.0; index.len()];
        for i in 0..192 {
            for s in 0..index.len() {
                let want = brute_cell(trajs, index, day, i, s, prev[s]);
                prev[s] = want.seg_speed;
                let got = grid.frame(dp, i, s);
                c.cells += 1;
                let exact = got.segment_id == want.segment_id
                    && got.interval_start == want.interval_start
                    && (got.cv_volume, got.counts(), got.is_imputed) == (want.cv_volume, want.counts(), want.is_imputed);
                if !exact {
                    c.exact_mismatches += 1;
                }
                c.max_real_diff = c.max_real_diff.max((got.seg_speed - want.seg_speed).abs()).max((got.cv_sv - want.cv_sv).abs());
                for (a, b) in c.seen.iter_mut().zip(want.counts()) {
                    *a += b;
                }
            }
        }
    }
    c
}
