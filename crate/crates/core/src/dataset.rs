//! Self-describing binary containers.
//!
//! Layout: one line of JSON (the header) terminated by `\n`, then a payload of
//! little-endian `f64`. Datasets and checkpoints share the framing.

use std::io::Write;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::features::{FrameGrid, NormStats, SegmentFrame, FEATURE_NAMES};
use crate::grid;
use crate::{Error, Result};

const MAX_HEADER_BYTES: usize = 64 << 20;

pub fn write_container<W: Write, H: Serialize>(mut out: W, header: &H, payload: &[f64]) -> Result<()> {
    let json = serde_json::to_string(header)?;
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER_BYTES)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: H = serde_json::from_slice(&bytes[..nl])?;
    let body = &bytes[nl + 1..];
    if !body.len().is_multiple_of(8) {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of f64", body.len())));
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, payload))
}

pub const DATASET_FORMAT: &str = "mmca-dataset";
pub const DATASET_VERSION: u32 = 1;
const VALUES_PER_FRAME: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    fields: Vec<String>,
    segment_ids: Vec<String>,
    days: Vec<String>,
    steps_per_day: usize,
    #[serde(default)]
    norm_stats: Option<NormStats>,
}

fn field_names() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).chain(["is_imputed".to_string()]).collect()
}

/// A frame grid on disk, optionally with the training split's stats.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: FrameGrid,
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let g = &self.grid;
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            fields: field_names(),
            segment_ids: g.segment_ids.clone(),
            days: g.days.iter().map(|&d| grid::date_of_day(d).to_string()).collect(),
            steps_per_day: g.steps_per_day,
            norm_stats: self.norm_stats.clone(),
        };
        let mut payload = Vec::with_capacity(g.frames.len() * VALUES_PER_FRAME);
        for f in &g.frames {
            payload.extend_from_slice(&f.features());
            payload.push(if f.is_imputed { 1.0 } else { 0.0 });
        }
        write_container(out, &header, &payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (DatasetHeader, Vec<f64>) = read_container(bytes)?;
        if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
            return Err(Error::Format(format!("expected {DATASET_FORMAT} v{DATASET_VERSION}, got {} v{}", h.format, h.version)));
        }
        if h.fields != field_names() {
            return Err(Error::Format(format!("unexpected field list {:?}", h.fields)));
        }
        if h.steps_per_day == 0 || h.steps_per_day > grid::STEPS_PER_DAY {
            return Err(Error::Format(format!("steps_per_day {} outside 1..=192", h.steps_per_day)));
        }
        if let Some(s) = &h.norm_stats {
            s.validate()?;
        }
        let days = h.days.iter().map(|d| grid::parse_day(d)).collect::<Result<Vec<_>>>()?;
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("days must be strictly increasing".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if h.segment_ids.iter().any(|s| !seen.insert(s)) {
            return Err(Error::Format("duplicate segment id".into()));
        }
        let n = h.segment_ids.len();
        let expected = days
            .len()
            .checked_mul(h.steps_per_day)
            .and_then(|v| v.checked_mul(n))
            .and_then(|v| v.checked_mul(VALUES_PER_FRAME))
            .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!("payload has {} values, header implies {expected}", payload.len())));
        }
        let mut frames = Vec::with_capacity(expected / VALUES_PER_FRAME);
        for (i, v) in payload.chunks_exact(VALUES_PER_FRAME).enumerate() {
            let seg = i % n.max(1);
            let step = (i / n.max(1)) % h.steps_per_day;
            let day = days[i / (n.max(1) * h.steps_per_day)];
            frames.push(frame_from_values(&h.segment_ids[seg], grid::interval_start(day, step), v).map_err(|e| {
                Error::Format(format!("frame {i}: {e}"))
            })?);
        }
        Ok(Self {
            grid: FrameGrid { segment_ids: h.segment_ids, steps_per_day: h.steps_per_day, days, frames },
            norm_stats: h.norm_stats,
        })
    }
}

fn count(v: f64, name: &str) -> std::result::Result<u32, String> {
    if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
        Ok(v as u32)
    } else {
        Err(format!("{name} = {v} is not a count"))
    }
}

fn frame_from_values(segment_id: &str, interval_start: i64, v: &[f64]) -> std::result::Result<SegmentFrame, String> {
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(format!("non-finite value in field {k}"));
    }
    if v[2] < 0.0 {
        return Err(format!("negative cv_sv {}", v[2]));
    }
    let is_imputed = match v[9] {
        0.0 => false,
        1.0 => true,
        x => return Err(format!("is_imputed = {x}")),
    };
    let mut f = SegmentFrame::imputed(segment_id, interval_start, v[0]);
    f.cv_volume = count(v[1], "cv_volume")?;
    f.cv_sv = v[2];
    let mut c = [0; 6];
    for (k, slot) in c.iter_mut().enumerate() {
        *slot = count(v[3 + k], FEATURE_NAMES[3 + k])?;
    }
    f.set_counts(c);
    f.is_imputed = is_imputed;
    if f.cv_volume == 0 && !f.is_imputed {
        return Err("zero volume without the imputed flag".into());
    }
    Ok(f)
}
