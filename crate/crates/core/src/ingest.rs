//! Connected-vehicle point ingestion: CSV parsing, per-journey cleaning,
//! segment assignment and penetration-rate downsampling.
//!
//! Positions are linear chainage in miles along the corridor, measured per
//! direction of travel so that chainage increases downstream. Projection from
//! GPS coordinates onto the corridor happens upstream of this module.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const POINTS_HEADER: [&str; 5] = ["journey_id", "timestamp", "chainage_mi", "heading_deg", "speed_mph"];
pub const SEGMENTS_HEADER: [&str; 4] = ["segment_id", "start_mi", "end_mi", "direction"];

/// Points at or above this speed are rejected.
pub const SPEED_CAP_MPH: f64 = 120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVPoint {
    pub journey_id: String,
    pub timestamp: i64,
    pub chainage_mi: f64,
    pub heading_deg: f64,
    pub speed_mph: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub journey_id: String,
    pub points: Vec<CVPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    SpeedCap,
    Malformed,
    NegativeSpeed,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::SpeedCap => "speed-cap",
            RejectReason::Malformed => "malformed",
            RejectReason::NegativeSpeed => "negative-speed",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the input; the header is line 1.
    pub line_no: u64,
    pub reason: RejectReason,
}

#[derive(Debug, Default)]
pub struct ParsedPoints {
    pub points: Vec<CVPoint>,
    pub rejections: Vec<Rejection>,
}

fn check_header(got: &csv::ByteRecord, want: &[&str]) -> Result<()> {
    let fields: Vec<&[u8]> = got.iter().collect();
    if fields.len() != want.len() || fields.iter().zip(want).any(|(g, w)| g.trim_ascii() != w.as_bytes()) {
        let shown = String::from_utf8_lossy(got.as_slice()).into_owned();
        return Err(Error::Header(format!("expected `{}`, got fields {:?}", want.join(","), shown)));
    }
    Ok(())
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input)
}

fn field(rec: &csv::ByteRecord, i: usize) -> Option<&str> {
    rec.get(i).and_then(|b| std::str::from_utf8(b).ok()).map(str::trim)
}

fn parse_point(rec: &csv::ByteRecord) -> std::result::Result<CVPoint, RejectReason> {
    use RejectReason::*;
    if rec.len() != POINTS_HEADER.len() {
        return Err(Malformed);
    }
    let journey_id = field(rec, 0).filter(|s| !s.is_empty()).ok_or(Malformed)?.to_string();
    let timestamp: i64 = field(rec, 1).and_then(|s| s.parse().ok()).ok_or(Malformed)?;
    let num = |i| field(rec, i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite()).ok_or(Malformed);
    let chainage_mi = num(2)?;
    let heading_deg = num(3)?;
    let speed_mph = num(4)?;
    if !(0.0..360.0).contains(&heading_deg) {
        return Err(Malformed);
    }
    if speed_mph < 0.0 {
        return Err(NegativeSpeed);
    }
    if speed_mph >= SPEED_CAP_MPH {
        return Err(SpeedCap);
    }
    Ok(CVPoint { journey_id, timestamp, chainage_mi, heading_deg, speed_mph })
}

/// Parse a points CSV. Bad rows are logged and skipped; a bad header is fatal.
pub fn parse_points<R: Read>(input: R) -> Result<ParsedPoints> {
    let mut rdr = reader(input);
    let mut out = ParsedPoints::default();
    let mut rec = csv::ByteRecord::new();
    let mut header_seen = false;
    loop {
        let line_no = rdr.position().line();
        match rdr.read_byte_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if header_seen && !matches!(e.kind(), csv::ErrorKind::Io(_)) => {
                out.rejections.push(Rejection { line_no, reason: RejectReason::Malformed });
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let line_no = rec.position().map(|p| p.line()).unwrap_or(line_no);
        if !header_seen {
            check_header(&rec, &POINTS_HEADER)?;
            header_seen = true;
            continue;
        }
        match parse_point(&rec) {
            Ok(p) => out.points.push(p),
            Err(reason) => out.rejections.push(Rejection { line_no, reason }),
        }
    }
    Ok(out)
}

pub fn write_points<W: Write>(out: W, points: &[CVPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(POINTS_HEADER)?;
    for p in points {
        w.write_record([
            p.journey_id.clone(),
            p.timestamp.to_string(),
            p.chainage_mi.to_string(),
            p.heading_deg.to_string(),
            p.speed_mph.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejections<W: Write>(out: W, rejections: &[Rejection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["line_no", "reason"])?;
    for r in rejections {
        w.write_record([r.line_no.to_string(), r.reason.code().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub start_mi: f64,
    pub end_mi: f64,
    pub direction: String,
}

/// Ordered corridor segments, contiguous and non-overlapping per direction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentIndex {
    segments: Vec<Segment>,
    /// direction -> indices into `segments`, sorted by start
    by_direction: BTreeMap<String, Vec<usize>>,
}

impl SegmentIndex {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut by_direction: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        for (i, s) in segments.iter().enumerate() {
            if !seen.insert(s.segment_id.as_str()) {
                return Err(Error::SegmentIndex(format!("duplicate segment id {:?}", s.segment_id)));
            }
            if !(s.start_mi.is_finite() && s.end_mi.is_finite() && s.end_mi > s.start_mi) {
                return Err(Error::SegmentIndex(format!(
                    "segment {:?} needs end > start, got [{}, {})",
                    s.segment_id, s.start_mi, s.end_mi
                )));
            }
            by_direction.entry(s.direction.clone()).or_default().push(i);
        }
        for (dir, idx) in by_direction.iter_mut() {
            idx.sort_by(|&a, &b| segments[a].start_mi.total_cmp(&segments[b].start_mi));
            for w in idx.windows(2) {
                let (a, b) = (&segments[w[0]], &segments[w[1]]);
                if a.end_mi != b.start_mi {
                    return Err(Error::SegmentIndex(format!(
                        "direction {dir}: segment {:?} ends at {} but {:?} starts at {}",
                        a.segment_id, a.end_mi, b.segment_id, b.start_mi
                    )));
                }
            }
        }
        Ok(Self { segments, by_direction })
    }

    /// Evenly sized contiguous segments `0..n` in one direction.
    pub fn uniform(n: usize, length_mi: f64, direction: &str) -> Result<Self> {
        let segments = (0..n)
            .map(|k| Segment {
                segment_id: format!("seg{k:03}"),
                start_mi: k as f64 * length_mi,
                end_mi: (k + 1) as f64 * length_mi,
                direction: direction.to_string(),
            })
            .collect();
        Self::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segment position (into [`Self::segments`]) containing the point.
    ///
    /// Segments are half-open `[start, end)`, so a point on a boundary goes to
    /// the downstream segment. With several directions in the index, the
    /// point's heading picks the direction by compass quadrant.
    pub fn locate(&self, chainage_mi: f64, heading_deg: f64) -> Option<usize> {
        let idx = if self.by_direction.len() == 1 {
            self.by_direction.values().next()?
        } else {
            self.by_direction.get(compass_direction(heading_deg))?
        };
        let pos = idx.partition_point(|&i| self.segments[i].start_mi <= chainage_mi);
        let cand = idx.get(pos.checked_sub(1)?)?;
        (chainage_mi < self.segments[*cand].end_mi).then_some(*cand)
    }
}

/// `NB` / `EB` / `SB` / `WB` by 90° quadrants centred on the compass points.
pub fn compass_direction(heading_deg: f64) -> &'static str {
    let h = heading_deg.rem_euclid(360.0);
    if !(45.0..315.0).contains(&h) {
        "NB"
    } else if h < 135.0 {
        "EB"
    } else if h < 225.0 {
        "SB"
    } else {
        "WB"
    }
}

pub fn parse_segment_index<R: Read>(input: R) -> Result<SegmentIndex> {
    let mut rdr = reader(input);
    let mut rec = csv::ByteRecord::new();
    if !rdr.read_byte_record(&mut rec)? {
        return Err(Error::Header("empty segment index file".into()));
    }
    check_header(&rec, &SEGMENTS_HEADER)?;
    let mut segments = Vec::new();
    while rdr.read_byte_record(&mut rec)? {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = || Error::SegmentIndex(format!("malformed row at line {line}"));
        if rec.len() != SEGMENTS_HEADER.len() {
            return Err(bad());
        }
        let num = |i| field(&rec, i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        segments.push(Segment {
            segment_id: field(&rec, 0).filter(|s| !s.is_empty()).ok_or_else(bad)?.to_string(),
            start_mi: num(1)?,
            end_mi: num(2)?,
            direction: field(&rec, 3).ok_or_else(bad)?.to_string(),
        });
    }
    SegmentIndex::new(segments)
}

pub fn write_segment_index<W: Write>(out: W, index: &SegmentIndex) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SEGMENTS_HEADER)?;
    for s in index.segments() {
        w.write_record([s.segment_id.clone(), s.start_mi.to_string(), s.end_mi.to_string(), s.direction.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningConfig {
    pub stationary_window_s: i64,
    pub stationary_speed_cap_mph: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self { stationary_window_s: 600, stationary_speed_cap_mph: 2.0 }
    }
}

/// Longest span (seconds) of consecutive points below `speed_cap`.
fn longest_stationary_span(points: &[CVPoint], speed_cap: f64) -> i64 {
    let mut best = 0;
    let mut run_start: Option<i64> = None;
    for p in points {
        if p.speed_mph < speed_cap {
            let start = *run_start.get_or_insert(p.timestamp);
            best = best.max(p.timestamp - start);
        } else {
            run_start = None;
        }
    }
    best
}

/// Group points into time-ordered journeys and drop stationary ones.
///
/// Output is sorted by journey id. Duplicate timestamps within a journey keep
/// the first occurrence in input order.
pub fn group_and_clean(points: Vec<CVPoint>, cfg: &CleaningConfig) -> Vec<Trajectory> {
    let mut groups: BTreeMap<String, Vec<CVPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.journey_id.clone()).or_default().push(p);
    }
    groups
        .into_iter()
        .filter_map(|(journey_id, mut pts)| {
            pts.sort_by_key(|p| p.timestamp);
            pts.dedup_by_key(|p| p.timestamp);
            let span = longest_stationary_span(&pts, cfg.stationary_speed_cap_mph);
            (span < cfg.stationary_window_s).then_some(Trajectory { journey_id, points: pts })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (segment position in the index, points in time order), by first visit.
    pub parts: Vec<(usize, Vec<CVPoint>)>,
    pub dropped: usize,
}

/// Split a trajectory by segment. Points outside every segment are dropped.
pub fn assign_segments(traj: &Trajectory, index: &SegmentIndex) -> Result<Assignment> {
    if index.is_empty() {
        return Err(Error::SegmentIndex("segment index is empty".into()));
    }
    let mut parts: Vec<(usize, Vec<CVPoint>)> = Vec::new();
    let mut dropped = 0;
    for p in &traj.points {
        match index.locate(p.chainage_mi, p.heading_deg) {
            Some(seg) => match parts.iter_mut().find(|(s, _)| *s == seg) {
                Some((_, pts)) => pts.push(p.clone()),
                None => parts.push((seg, vec![p.clone()])),
            },
            None => dropped += 1,
        }
    }
    Ok(Assignment { parts, dropped })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Uniform draw in `[0, 1)` keyed by `(seed, journey_id)`.
fn journey_uniform(seed: u64, journey_id: &str) -> f64 {
    let h = splitmix64(splitmix64(seed) ^ fnv1a(journey_id.as_bytes()));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Keep each journey independently with probability `keep_fraction`.
///
/// The draw for a journey depends only on the seed and its id, so the result
/// does not depend on collection order and lower fractions keep subsets of
/// what higher fractions keep.
pub fn downsample_penetration(trajs: &[Trajectory], keep_fraction: f64, seed: u64) -> Result<Vec<Trajectory>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Invalid(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    Ok(trajs
        .iter()
        .filter(|t| journey_uniform(seed, &t.journey_id) < keep_fraction)
        .cloned()
        .collect())
}
