//! Toy configs and a straight-line single-example reference of one
//! attention layer, shared by the model tests.
#![allow(dead_code)]

pub mod features_ref;

use mmca::features::{MACRO_DIM, MICRO_DIM};
use mmca::model::{Axis, Batch, LayerTrace, Mode, Model, ModelConfig};
use mmca::numcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy() -> ModelConfig {
    ModelConfig {
        n_segments: 4,
        history: 4,
        horizon: 4,
        d_f: 4,
        d_dow: 2,
        d_tod: 2,
        d_a: 8,
        layers: 2,
        heads: 2,
        steps_per_day: 16,
        ..Default::default()
    }
}

/// A model whose biases and norm parameters are not at their trivial init.
pub fn jittered(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(ModelConfig { init_seed: seed, ..cfg }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for t in &mut m.params.tensors {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, n, f) = (cfg.history, cfg.n_segments, cfg.horizon);
    Batch {
        size: b,
        macro_x: Tensor::from_fn(&[b, h, n, MACRO_DIM], |_| rng.random()),
        micro_x: Tensor::from_fn(&[b, h, n, MICRO_DIM], |_| rng.random()),
        tod: (0..b * h).map(|_| rng.random_range(0..cfg.steps_per_day)).collect(),
        dow: (0..b * h).map(|_| rng.random_range(0..7)).collect(),
        target: Tensor::from_fn(&[b, n, f], |_| rng.random()),
        target_mph: vec![0.0; b * n * f],
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Straight-line single-example reference.

pub fn param<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.params.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

pub fn matmul(a: &[f64], rows: usize, k: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * w[t * cols + j];
            }
            out[i * cols + j] = s;
        }
    }
    out
}

pub fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn plus_bias(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().enumerate().map(|(i, x)| x + b[i % b.len()]).collect()
}

pub fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mu) / (var + eps).sqrt() * g[j] + b[j]));
    }
    out
}

pub fn ref_attention(m: &Model, prefix: &str, q_src: &[f64], kv: &[f64], s: usize) -> Vec<f64> {
    let d = m.config.d_h();
    let heads = m.config.heads;
    let dh = d / heads;
    let q = matmul(q_src, s, d, param(m, &format!("{prefix}.wq")), d);
    let k = matmul(kv, s, d, param(m, &format!("{prefix}.wk")), d);
    let v = matmul(kv, s, d, param(m, &format!("{prefix}.wv")), d);
    let mut ctx = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            let logits: Vec<f64> = (0..s)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                ctx[i * d + h * dh + c] = (0..s).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    let out = matmul(&ctx, s, d, param(m, &format!("{prefix}.wo")), d);
    plus_bias(&out, param(m, &format!("{prefix}.bo")))
}

pub fn ref_layer(m: &Model, pre: &str, z: &[f64], micro: Option<&[f64]>, s: usize) -> Vec<f64> {
    let c = &m.config;
    let d = c.d_h();
    let eps = c.layer_norm_eps;
    let sa = ref_attention(m, &format!("{pre}.self"), z, z, s);
    let (g1, b1) = (param(m, &format!("{pre}.ln1.gamma")), param(m, &format!("{pre}.ln1.beta")));
    let fused = match micro {
        Some(mi) if c.use_cross_attention => {
            let ca = ref_attention(m, &format!("{pre}.cross"), &sa, mi, s);
            layer_norm(&plus(&sa, &ca), d, g1, b1, eps)
        }
        Some(mi) => {
            let cat: Vec<f64> = (0..s).flat_map(|i| sa[i * d..(i + 1) * d].iter().chain(&mi[i * d..(i + 1) * d]).copied()).collect();
            let proj = plus_bias(&matmul(&cat, s, 2 * d, param(m, &format!("{pre}.fuse.w")), d), param(m, &format!("{pre}.fuse.b")));
            layer_norm(&plus(&sa, &proj), d, g1, b1, eps)
        }
        None => layer_norm(&sa, d, g1, b1, eps),
    };
    if !c.use_feed_forward {
        return fused;
    }
    let hid = c.ff_width();
    let h1 = plus_bias(&matmul(&fused, s, d, param(m, &format!("{pre}.ff.w1")), hid), param(m, &format!("{pre}.ff.b1")));
    let h1: Vec<f64> = h1.iter().map(|v| v.max(0.0)).collect();
    let h2 = plus_bias(&matmul(&h1, s, hid, param(m, &format!("{pre}.ff.w2")), d), param(m, &format!("{pre}.ff.b2")));
    layer_norm(&plus(&fused, &h2), d, param(m, &format!("{pre}.ln2.gamma")), param(m, &format!("{pre}.ln2.beta")), eps)
}

pub fn run_layer(m: &Model, axis: Axis, z: &Tensor, micro: Option<&Tensor>) -> (Tape, Var, LayerTrace) {
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let mv = micro.map(|t| tape.constant(t.clone()));
    let mut site = 0;
    let (out, trace) = m.layer(&mut tape, &p, axis, 1, zv, mv, Mode::EVAL, &mut site).unwrap();
    drop(p);
    (tape, out, trace)
}
