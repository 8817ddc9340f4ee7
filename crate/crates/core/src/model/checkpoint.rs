use std::io::Write;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use super::{param_layout, Model, ModelConfig, ModelParams};
use crate::dataset::{read_container, write_container};
use crate::features::NormStats;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mmca-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    norm_stats: Option<NormStats>,
    params: Vec<ParamEntry>,
}

/// A model plus the normalization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm_stats: Option<NormStats>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut offset = 0;
        let mut params = Vec::with_capacity(self.model.params.names.len());
        let mut payload = Vec::with_capacity(self.model.param_count());
        for (name, t) in self.model.params.names.iter().zip(&self.model.params.tensors) {
            params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
            payload.extend_from_slice(t.data());
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            norm_stats: self.norm_stats.clone(),
            params,
        };
        write_container(out, &header, &payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (CheckpointHeader, Vec<f64>) = read_container(bytes)?;
        if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, got {} v{}",
                h.format, h.version
            )));
        }
        h.config.validate()?;
        if let Some(s) = &h.norm_stats {
            s.validate()?;
        }
        let layout = param_layout(&h.config);
        if layout.len() != h.params.len() {
            return Err(Error::Format(format!("config implies {} tensors, header lists {}", layout.len(), h.params.len())));
        }
        let mut offset = 0usize;
        for ((name, shape, _), e) in layout.iter().zip(&h.params) {
            if *name != e.name || *shape != e.shape || e.offset != offset {
                return Err(Error::Format(format!("parameter entry {} does not match the config layout", e.name)));
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("parameter size overflows".into()))?;
            offset = offset.checked_add(len).ok_or_else(|| Error::Format("parameter size overflows".into()))?;
        }
        if offset != payload.len() {
            return Err(Error::Format(format!("payload has {} values, layout needs {offset}", payload.len())));
        }
        if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite weight at payload index {i}")));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape, _) in layout {
            let start = h.params[names.len()].offset;
            let len = shape.iter().product::<usize>();
            tensors.push(Tensor::new(&shape, payload[start..start + len].to_vec())?);
            names.push(name);
        }
        let model = Model::from_parts(h.config, ModelParams { names, tensors })?;
        Ok(Self { model, norm_stats: h.norm_stats })
    }
}
