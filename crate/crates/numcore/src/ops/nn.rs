use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::numel;
use crate::{NumError, Result, Tape, Tensor, Var};

impl Tape {
    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::InvalidArgument(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| {
                let y = ctx.out.data();
                let g = ctx.grad.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.out.shape(), gx).expect("softmax grad"))]
            }),
        ))
    }

    /// Layer normalisation over the last axis with learnable `gamma`/`beta` (both `[d]`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| NumError::InvalidArgument("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumError::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / d.max(1);
        let x = self.value(a).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * gm[j] + bt[j];
            }
        }
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(
            value,
            &[a, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gm = ctx.parents[1].data();
                let mut gx = ctx.needs[0].then(|| vec![0.0; g.len()]);
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        ggamma[j] += g[k] * xhat[k];
                        gbeta[j] += g[k];
                        let dxh = g[k] * gm[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[k];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..d {
                            let k = r * d + j;
                            gx[k] = rstd[r] * (g[k] * gm[j] - mean_dxh - xhat[k] * mean_dxh_xh);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::new(ctx.parents[0].shape(), v).expect("layer_norm grad")),
                    Some(Tensor::new(&[d], ggamma).expect("gamma grad")),
                    Some(Tensor::new(&[d], gbeta).expect("beta grad")),
                ]
            }),
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    /// Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let x = self.value(a);
        let value = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(v, m)| v * m).collect())?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                vec![Some(Tensor::from_fn(ctx.grad.shape(), |i| g[i] * mask[i]))]
            }),
        ))
    }
}
