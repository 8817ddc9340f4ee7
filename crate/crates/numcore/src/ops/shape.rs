use crate::tensor::{broadcast_shape, numel, reduce_to_shape, Tensor as T};
use crate::{NumError, Result, Tape, Tensor, Var};

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.reshape(ctx.parents[0].shape()).expect("reshape grad"))]),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.permute(&inverse).expect("permute grad"))]),
        ))
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumError::InvalidArgument("concat of zero tensors".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return Err(NumError::InvalidArgument("concat of scalars".into()));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(NumError::shape("concat", self.shape(first), s));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            parts,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (pi, &w) in widths.iter().enumerate() {
                    if ctx.needs[pi] {
                        let mut gd = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gd.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        grads.push(Some(T::new(ctx.parents[pi].shape(), gd).expect("concat grad")));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(NumError::InvalidArgument(format!(
                "slice axis {axis} range {start}..{end} invalid for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let len = shape[axis];
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = w;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| {
                let mut full = T::zeros(&shape);
                let g = ctx.grad.data();
                let fd = full.data_mut();
                for o in 0..outer {
                    fd[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(full)]
            }),
        ))
    }

    /// Repeat `a` to `shape` under broadcasting rules.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let out = broadcast_shape("broadcast_to", &sa, shape)?;
        if out != shape {
            return Err(NumError::shape("broadcast_to", &sa, shape));
        }
        let map = crate::tensor::broadcast_index_map(&sa, shape);
        let src = self.value(a).data();
        let value = Tensor::new(shape, map.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(
            value,
            &[a],
            Box::new(|ctx| vec![Some(reduce_to_shape(ctx.grad, ctx.parents[0].shape()))]),
        ))
    }

    /// Rows of `table` (`[vocab, dim]`) gathered by `indices`, shaped `[prefix..., dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(NumError::InvalidArgument(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if numel(prefix) != indices.len() {
            return Err(NumError::InvalidArgument(format!(
                "embedding prefix {prefix:?} does not hold {} indices",
                indices.len()
            )));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(NumError::InvalidArgument(format!("embedding index {bad} >= table size {vocab}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        let value = Tensor::new(&shape, data)?;
        let indices = indices.to_vec();
        Ok(self.push(
            value,
            &[table],
            Box::new(move |ctx| {
                let mut gt = T::zeros(ctx.parents[0].shape());
                let g = ctx.grad.data();
                let gd = gt.data_mut();
                for (row, &i) in indices.iter().enumerate() {
                    for d in 0..dim {
                        gd[i * dim + d] += g[row * dim + d];
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }
}
