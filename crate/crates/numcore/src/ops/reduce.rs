use crate::tensor::numel;
use crate::{NumError, Result, Tape, Tensor, Var};

impl Tape {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            &[a],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.parents[0].shape(), ctx.grad.item()))]),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.push(
            value,
            &[a],
            Box::new(move |ctx| vec![Some(Tensor::full(ctx.parents[0].shape(), ctx.grad.item() / n))]),
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, 1.0)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| NumError::InvalidArgument(format!("mean_axis {axis} out of range")))?;
        self.reduce_axis(a, axis, 1.0 / len.max(1) as f64)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, scale: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumError::InvalidArgument(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, gx).expect("reduce grad"))]
            }),
        ))
    }
}
