use std::io::Write;

use numcore::{Tape, Tensor};

use super::{Axis, LayerTrace};
use crate::{Error, Result};

/// Attention probabilities of one layer, summed over the samples seen.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layer: usize,
    pub axis: Axis,
    /// `[A, heads, S, S]` where `A` is the axis not attended over.
    pub self_sum: Tensor,
    pub cross_sum: Option<Tensor>,
    pub samples: usize,
}

impl LayerScores {
    fn mean_of(t: &Tensor, n: usize) -> Tensor {
        t.map(|v| v / n.max(1) as f64)
    }

    pub fn self_mean(&self) -> Tensor {
        Self::mean_of(&self.self_sum, self.samples)
    }

    pub fn cross_mean(&self) -> Option<Tensor> {
        self.cross_sum.as_ref().map(|t| Self::mean_of(t, self.samples))
    }
}

/// Batch-averaged attention maps for every layer of a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionScores {
    pub layers: Vec<LayerScores>,
}

fn batch_sum(t: &Tensor) -> Tensor {
    let shape = &t.shape()[1..];
    let per = shape.iter().product::<usize>();
    let mut out = Tensor::zeros(shape);
    for chunk in t.data().chunks_exact(per.max(1)) {
        for (o, v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl AttentionScores {
    pub(crate) fn push(&mut self, tape: &Tape, layer: usize, axis: Axis, trace: &LayerTrace) {
        let self_p = tape.value(trace.self_probs);
        let samples = self_p.shape()[0];
        self.layers.push(LayerScores {
            layer,
            axis,
            self_sum: batch_sum(self_p),
            cross_sum: trace.cross_probs.map(|v| batch_sum(tape.value(v))),
            samples,
        });
    }

    /// Fold in another pass over the same model.
    pub fn merge(&mut self, other: &AttentionScores) -> Result<()> {
        if self.layers.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::Invalid("attention score sets come from different models".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.self_sum.shape() != b.self_sum.shape() || a.cross_sum.is_some() != b.cross_sum.is_some() {
                return Err(Error::Invalid("attention score shapes differ".into()));
            }
            a.self_sum.add_assign(&b.self_sum);
            if let (Some(x), Some(y)) = (a.cross_sum.as_mut(), b.cross_sum.as_ref()) {
                x.add_assign(y);
            }
            a.samples += b.samples;
        }
        Ok(())
    }

    /// CSV `layer,kind,head,axis_index,query,key,score` of the mean maps.
    ///
    /// For spatial layers `axis_index` is the time step and query/key are
    /// segments; for temporal layers it is the segment and query/key are steps.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "kind", "head", "axis_index", "query", "key", "score"])?;
        for ls in &self.layers {
            let mut maps = vec![("self", ls.self_mean())];
            if let Some(c) = ls.cross_mean() {
                maps.push(("cross", c));
            }
            for (which, t) in maps {
                let kind = format!("{}_{which}", ls.axis.name());
                let s = t.shape();
                let (a_len, heads, q_len, k_len) = (s[0], s[1], s[2], s[3]);
                for head in 0..heads {
                    for a in 0..a_len {
                        for q in 0..q_len {
                            for k in 0..k_len {
                                let v = t.data()[((a * heads + head) * q_len + q) * k_len + k];
                                w.write_record([
                                    ls.layer.to_string(),
                                    kind.clone(),
                                    head.to_string(),
                                    a.to_string(),
                                    q.to_string(),
                                    k.to_string(),
                                    format!("{v:.9}"),
                                ])?;
                            }
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
