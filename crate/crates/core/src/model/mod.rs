//! The macro-micro cross-attention network.
//!
//! `embed` → `layers` spatial macro-micro attention layers → `layers`
//! temporal ones → a per-node Student-t head. Every ablation is a
//! [`ModelConfig`] switch on the same code path.

mod checkpoint;
mod config;
mod layers;
mod scores;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::ModelConfig;
pub use layers::{Axis, LayerTrace};
pub use scores::{AttentionScores, LayerScores};

use std::collections::HashMap;

use numcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{NormalizedGrid, WindowRef, MACRO_DIM, MICRO_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter for `cfg`, in order.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_h();
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    let mut streams = vec![("macro", MACRO_DIM)];
    if cfg.use_micro {
        streams.push(("micro", MICRO_DIM));
    }
    for (s, c) in streams {
        push(format!("embed.{s}.fc.w"), vec![c, cfg.d_f], Init::Xavier);
        push(format!("embed.{s}.fc.b"), vec![cfg.d_f], Init::Zeros);
        push(format!("embed.{s}.dow"), vec![7, cfg.d_dow], Init::Xavier);
        push(format!("embed.{s}.tod"), vec![cfg.steps_per_day, cfg.d_tod], Init::Xavier);
        push(format!("embed.{s}.adp"), vec![cfg.history, cfg.n_segments, cfg.d_a], Init::Xavier);
    }
    let mut kinds = Vec::new();
    if cfg.use_spatial {
        kinds.push(Axis::Spatial);
    }
    if cfg.use_temporal {
        kinds.push(Axis::Temporal);
    }
    for axis in kinds {
        for l in 0..cfg.layers {
            let p = format!("{}.{l}", axis.name());
            let mut attn = |sub: &str| {
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("{p}.{sub}.{w}"), vec![d, d], Init::Xavier);
                }
                push(format!("{p}.{sub}.bo"), vec![d], Init::Zeros);
            };
            attn("self");
            if cfg.has_cross() {
                attn("cross");
            }
            if cfg.use_micro && !cfg.use_cross_attention {
                push(format!("{p}.fuse.w"), vec![2 * d, d], Init::Xavier);
                push(format!("{p}.fuse.b"), vec![d], Init::Zeros);
            }
            push(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
            push(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
            if cfg.use_feed_forward {
                let hid = cfg.ff_width();
                push(format!("{p}.ff.w1"), vec![d, hid], Init::Xavier);
                push(format!("{p}.ff.b1"), vec![hid], Init::Zeros);
                push(format!("{p}.ff.w2"), vec![hid, d], Init::Xavier);
                push(format!("{p}.ff.b2"), vec![d], Init::Zeros);
                push(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
                push(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
            }
        }
    }
    for head in ["mean", "var", "df"] {
        push(format!("head.{head}.w"), vec![cfg.history * d, cfg.horizon], Init::Xavier);
        push(format!("head.{head}.b"), vec![cfg.horizon], Init::Zeros);
    }
    out
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Xavier => {
            let fan_out = shape[shape.len() - 1];
            let fan_in = shape[shape.len() - 2];
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-a..a))
        }
    }
}

/// Learnable weights by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }
}

/// A batch of windows as dense model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `[B, H, N, 2]`
    pub macro_x: Tensor,
    /// `[B, H, N, 7]`
    pub micro_x: Tensor,
    /// `B * H` entries
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    /// `[B, N, F]`, normalized with the speed stats (unclipped)
    pub target: Tensor,
    /// `[B, N, F]` in mph
    pub target_mph: Vec<f64>,
}

impl Batch {
    pub fn gather(grid: &NormalizedGrid, windows: &[WindowRef], h: usize, f: usize) -> Result<Self> {
        let n = grid.n_segments;
        let b = windows.len();
        let mut macro_x = Vec::with_capacity(b * h * n * MACRO_DIM);
        let mut micro_x = Vec::with_capacity(b * h * n * MICRO_DIM);
        let mut target_mph = vec![0.0; b * n * f];
        let mut tod = Vec::with_capacity(b * h);
        let mut dow = Vec::with_capacity(b * h);
        for (bi, w) in windows.iter().enumerate() {
            if w.day_pos >= grid.days.len() || w.start + h + f > grid.steps_per_day {
                return Err(Error::Invalid(format!("window {w:?} does not fit the grid")));
            }
            let fw = grid.window(w, h, f);
            macro_x.extend_from_slice(&fw.macro_feats);
            micro_x.extend_from_slice(&fw.micro_feats);
            tod.extend_from_slice(&fw.tod_index);
            dow.extend_from_slice(&fw.dow_index);
            // F × N → N × F
            for t in 0..f {
                for s in 0..n {
                    target_mph[(bi * n + s) * f + t] = fw.target_mph[t * n + s];
                }
            }
        }
        let target = target_mph.iter().map(|&v| grid.stats.normalize_speed(v)).collect();
        Ok(Self {
            size: b,
            macro_x: Tensor::new(&[b, h, n, MACRO_DIM], macro_x)?,
            micro_x: Tensor::new(&[b, h, n, MICRO_DIM], micro_x)?,
            tod,
            dow,
            target: Tensor::new(&[b, n, f], target)?,
            target_mph,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    /// Base seed for this step's dropout masks.
    pub seed: u64,
    pub capture_scores: bool,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, seed: 0, capture_scores: false };
}

/// Network outputs, each `[B, N, F]`.
#[derive(Debug)]
pub struct Output {
    pub mean: Var,
    pub scale2: Var,
    pub df: Var,
    pub scores: Option<AttentionScores>,
}

/// Point and distribution forecasts as plain arrays, `[B, N, F]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TDistForecast {
    pub shape: [usize; 3],
    pub mean: Vec<f64>,
    pub scale2: Vec<f64>,
    pub df: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    index: HashMap<String, usize>,
}

/// Parameters registered on one tape, addressable by name.
pub struct Bound<'m> {
    model: &'m Model,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.model
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("model has no parameter {name:?}")))
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layout = param_layout(&config);
        let names: Vec<String> = layout.iter().map(|(n, _, _)| n.clone()).collect();
        let tensors = layout.iter().map(|(_, s, init)| init_tensor(s, *init, &mut rng)).collect();
        let model = Self::from_parts(config, ModelParams { names, tensors })?;
        log::debug!("model with {} parameters", model.params.count());
        Ok(model)
    }

    /// Pair a config with existing weights, checking every name and shape.
    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.names.len() || params.tensors.len() != params.names.len() {
            return Err(Error::Config(format!(
                "config needs {} parameter tensors, got {}",
                layout.len(),
                params.names.len()
            )));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!("expected {name} {shape:?}, got {n} {:?}", t.shape())));
            }
        }
        let index = params.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, params, index })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Register the parameters on a tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { model: self, vars }
    }

    /// Address existing tape variables as this model's parameters, in
    /// layout order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.params.tensors.len() {
            return Err(Error::Invalid(format!("model has {} parameter tensors, got {} vars", self.params.tensors.len(), vars.len())));
        }
        Ok(Bound { model: self, vars })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let want = [batch.size, c.history, c.n_segments, MACRO_DIM];
        if batch.macro_x.shape() != want {
            return Err(Error::Invalid(format!("macro input {:?}, model expects {want:?}", batch.macro_x.shape())));
        }
        let want = [batch.size, c.history, c.n_segments, MICRO_DIM];
        if batch.micro_x.shape() != want {
            return Err(Error::Invalid(format!("micro input {:?}, model expects {want:?}", batch.micro_x.shape())));
        }
        if batch.tod.len() != batch.size * c.history || batch.dow.len() != batch.tod.len() {
            return Err(Error::Invalid("calendar indices do not match the batch".into()));
        }
        if let Some(t) = batch.tod.iter().find(|&&t| t >= c.steps_per_day) {
            return Err(Error::Invalid(format!("tod_index {t} >= steps_per_day {}", c.steps_per_day)));
        }
        if let Some(d) = batch.dow.iter().find(|&&d| d >= 7) {
            return Err(Error::Invalid(format!("dow_index {d} >= 7")));
        }
        Ok(())
    }

    /// Embedded macro and (when used) micro streams, each `[B, H, N, d_h]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound<'_>, batch: &Batch) -> Result<(Var, Option<Var>)> {
        self.check_batch(batch)?;
        let x = tape.constant(batch.macro_x.clone());
        let z_macro = self.embed_stream(tape, p, "macro", x, batch)?;
        let z_micro = if self.config.use_micro {
            let mut x = batch.micro_x.clone();
            let mask = self.config.micro_feature_mask;
            if mask.iter().any(|&m| m) {
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    if mask[i % MICRO_DIM] {
                        *v = 0.0;
                    }
                }
            }
            let x = tape.constant(x);
            Some(self.embed_stream(tape, p, "micro", x, batch)?)
        } else {
            None
        };
        Ok((z_macro, z_micro))
    }

    fn embed_stream(&self, tape: &mut Tape, p: &Bound<'_>, stream: &str, x: Var, batch: &Batch) -> Result<Var> {
        let c = &self.config;
        let (b, h, n) = (batch.size, c.history, c.n_segments);
        let fc = tape.matmul(x, p.var(&format!("embed.{stream}.fc.w"))?)?;
        let fc = tape.add(fc, p.var(&format!("embed.{stream}.fc.b"))?)?;
        let dow = tape.embedding(p.var(&format!("embed.{stream}.dow"))?, &batch.dow, &[b, h, 1])?;
        let dow = tape.broadcast_to(dow, &[b, h, n, c.d_dow])?;
        let tod = tape.embedding(p.var(&format!("embed.{stream}.tod"))?, &batch.tod, &[b, h, 1])?;
        let tod = tape.broadcast_to(tod, &[b, h, n, c.d_tod])?;
        let adp = tape.broadcast_to(p.var(&format!("embed.{stream}.adp"))?, &[b, h, n, c.d_a])?;
        Ok(tape.concat(&[fc, dow, tod, adp])?)
    }

    /// Full forward pass.
    pub fn forward(&self, tape: &mut Tape, p: &Bound<'_>, batch: &Batch, mode: Mode) -> Result<Output> {
        let c = &self.config;
        let (b, h, n, d) = (batch.size, c.history, c.n_segments, c.d_h());
        let (mut z, micro) = self.embed(tape, p, batch)?;
        let mut site = 0u64;
        let mut scores = mode.capture_scores.then(AttentionScores::default);

        if c.use_spatial {
            for l in 0..c.layers {
                let (out, trace) = self.layer(tape, p, Axis::Spatial, l, z, micro, mode, &mut site)?;
                z = out;
                if let Some(s) = scores.as_mut() {
                    s.push(tape, l, Axis::Spatial, &trace);
                }
            }
        }
        if c.use_temporal {
            // attend over H: [B, N, H, d]
            z = tape.permute(z, &[0, 2, 1, 3])?;
            let micro_t = micro.map(|m| tape.permute(m, &[0, 2, 1, 3])).transpose()?;
            for l in 0..c.layers {
                let (out, trace) = self.layer(tape, p, Axis::Temporal, l, z, micro_t, mode, &mut site)?;
                z = out;
                if let Some(s) = scores.as_mut() {
                    s.push(tape, l, Axis::Temporal, &trace);
                }
            }
        } else {
            z = tape.permute(z, &[0, 2, 1, 3])?;
        }
        // z is [B, N, H, d]; flatten H × d per node
        let flat = tape.reshape(z, &[b, n, h * d])?;
        let head = |tape: &mut Tape, name: &str| -> Result<Var> {
            let y = tape.matmul(flat, p.var(&format!("head.{name}.w"))?)?;
            Ok(tape.add(y, p.var(&format!("head.{name}.b"))?)?)
        };
        let mean = head(tape, "mean")?;
        let v = head(tape, "var")?;
        let scale2 = tape.softplus(v);
        let nu = head(tape, "df")?;
        let nu = tape.softplus(nu);
        let df = tape.add_scalar(nu, 2.0);
        Ok(Output { mean, scale2, df, scores })
    }

    /// Inference on plain arrays.
    pub fn predict(&self, batch: &Batch) -> Result<TDistForecast> {
        self.predict_with_scores(batch, false).map(|(f, _)| f)
    }

    pub fn predict_with_scores(&self, batch: &Batch, capture: bool) -> Result<(TDistForecast, Option<AttentionScores>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, batch, Mode { capture_scores: capture, ..Mode::EVAL })?;
        let shape = [batch.size, self.config.n_segments, self.config.horizon];
        let fc = TDistForecast {
            shape,
            mean: tape.value(out.mean).data().to_vec(),
            scale2: tape.value(out.scale2).data().to_vec(),
            df: tape.value(out.df).data().to_vec(),
        };
        Ok((fc, out.scores))
    }
}
