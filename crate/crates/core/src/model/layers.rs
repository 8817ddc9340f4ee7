use numcore::{Tape, Var};

use super::{splitmix, Bound, Mode, Model};
use crate::Result;

/// Which axis a macro-micro attention layer mixes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Segments, inputs laid out `[B, H, N, d]`.
    Spatial,
    /// Time steps, inputs laid out `[B, N, H, d]`.
    Temporal,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Spatial => "spatial",
            Axis::Temporal => "temporal",
        }
    }
}

/// Intermediate values of one layer, for score export and tests.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// `[B, A, heads, S, S]`, pre-dropout
    pub self_probs: Var,
    /// Value projection of the layer input, `[B, A, S, d]`.
    pub self_values: Var,
    /// Attention-weighted values with heads concatenated, before the output
    /// projection.
    pub self_context: Var,
    pub self_out: Var,
    pub cross_probs: Option<Var>,
    pub cross_out: Option<Var>,
    pub fused: Var,
}

struct Attention {
    out: Var,
    values: Var,
    context: Var,
    probs: Var,
}

fn next_seed(mode: Mode, site: &mut u64) -> u64 {
    *site += 1;
    splitmix(mode.seed ^ splitmix(*site))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

impl Model {
    /// Multi-head attention of `q_src` over `kv_src`, both `[B, A, S, d]`.
    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound<'_>,
        prefix: &str,
        q_src: Var,
        kv_src: Var,
        mode: Mode,
        site: &mut u64,
    ) -> Result<Attention> {
        let c = &self.config;
        let shape = tape.shape(q_src).to_vec();
        let (b, a, s, d) = (shape[0], shape[1], shape[2], shape[3]);
        let (heads, dh) = (c.heads, c.head_dim());
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[b, a, s, heads, dh])?;
            Ok(tape.permute(x, &[0, 1, 3, 2, 4])?)
        };
        let q = tape.matmul(q_src, p.var(&format!("{prefix}.wq"))?)?;
        let k = tape.matmul(kv_src, p.var(&format!("{prefix}.wk"))?)?;
        let values = tape.matmul(kv_src, p.var(&format!("{prefix}.wv"))?)?;
        let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, values)?);
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.mul_scalar(logits, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(logits, 4)?;
        let dropped = tape.dropout(probs, c.dropout, next_seed(mode, site), mode.train)?;
        let ctx = tape.matmul(dropped, vh)?;
        let ctx = tape.permute(ctx, &[0, 1, 3, 2, 4])?;
        let context = tape.reshape(ctx, &[b, a, s, d])?;
        let out = linear(tape, context, p.var(&format!("{prefix}.wo"))?, p.var(&format!("{prefix}.bo"))?)?;
        Ok(Attention { out, values, context, probs })
    }

    /// One macro-micro attention layer: self-attention on the macro stream,
    /// cross-attention from it into the micro stream, fusion by sum and layer
    /// norm, then the feed-forward sublayer.
    #[allow(clippy::too_many_arguments)]
    pub fn layer(
        &self,
        tape: &mut Tape,
        p: &Bound<'_>,
        axis: Axis,
        l: usize,
        z: Var,
        micro: Option<Var>,
        mode: Mode,
        site: &mut u64,
    ) -> Result<(Var, LayerTrace)> {
        let c = &self.config;
        let eps = c.layer_norm_eps;
        let pre = format!("{}.{l}", axis.name());
        let sa = self.attention(tape, p, &format!("{pre}.self"), z, z, mode, site)?;
        let mut cross_probs = None;
        let mut cross_out = None;
        let ln1 = (p.var(&format!("{pre}.ln1.gamma"))?, p.var(&format!("{pre}.ln1.beta"))?);
        let fused = match micro.filter(|_| c.use_micro) {
            Some(m) if c.use_cross_attention => {
                let ca = self.attention(tape, p, &format!("{pre}.cross"), sa.out, m, mode, site)?;
                cross_probs = Some(ca.probs);
                cross_out = Some(ca.out);
                let sum = tape.add(sa.out, ca.out)?;
                tape.layer_norm(sum, ln1.0, ln1.1, eps)?
            }
            Some(m) => {
                let cat = tape.concat(&[sa.out, m])?;
                let proj = linear(tape, cat, p.var(&format!("{pre}.fuse.w"))?, p.var(&format!("{pre}.fuse.b"))?)?;
                let sum = tape.add(sa.out, proj)?;
                tape.layer_norm(sum, ln1.0, ln1.1, eps)?
            }
            None => tape.layer_norm(sa.out, ln1.0, ln1.1, eps)?,
        };
        let out = if c.use_feed_forward {
            let h = linear(tape, fused, p.var(&format!("{pre}.ff.w1"))?, p.var(&format!("{pre}.ff.b1"))?)?;
            let h = tape.relu(h);
            let h = linear(tape, h, p.var(&format!("{pre}.ff.w2"))?, p.var(&format!("{pre}.ff.b2"))?)?;
            let h = tape.dropout(h, c.dropout, next_seed(mode, site), mode.train)?;
            let sum = tape.add(fused, h)?;
            tape.layer_norm(sum, p.var(&format!("{pre}.ln2.gamma"))?, p.var(&format!("{pre}.ln2.beta"))?, eps)?
        } else {
            fused
        };
        let trace = LayerTrace {
            self_probs: sa.probs,
            self_values: sa.values,
            self_context: sa.context,
            self_out: sa.out,
            cross_probs,
            cross_out,
            fused,
        };
        Ok((out, trace))
    }
}
