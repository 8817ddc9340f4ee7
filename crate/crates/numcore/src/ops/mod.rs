//! Differentiable operations, implemented as methods on [`Tape`].

mod linalg;
mod nn;
mod reduce;
mod shape;

use std::sync::Arc;

use crate::special;
use crate::tensor::{broadcast_index_map, broadcast_shape, is_suffix_broadcast, numel, reduce_to_shape};
use crate::{NumError, Result, Tape, Tensor, Var};

/// How an operand's flat index is derived from the broadcast output index.
#[derive(Clone)]
enum Bidx {
    Same,
    Cycle(usize),
    Map(Arc<Vec<usize>>),
}

impl Bidx {
    fn plan(in_shape: &[usize], out_shape: &[usize]) -> Self {
        if in_shape == out_shape {
            Bidx::Same
        } else if is_suffix_broadcast(in_shape, out_shape) {
            Bidx::Cycle(numel(in_shape).max(1))
        } else {
            Bidx::Map(Arc::new(broadcast_index_map(in_shape, out_shape)))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bidx::Same => i,
            Bidx::Cycle(n) => i % n,
            Bidx::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

impl Tape {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(kind.name(), &sa, &sb)?;
        let ia = Bidx::plan(&sa, &out_shape);
        let ib = Bidx::plan(&sb, &out_shape);
        let n = numel(&out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = (0..n).map(|i| kind.apply(da[ia.at(i)], db[ib.at(i)])).collect();
        let value = Tensor::new(&out_shape, data)?;

        let backward = Box::new(move |ctx: &crate::tape::BackwardCtx<'_>| {
            let g = ctx.grad.data();
            let (xa, xb) = (ctx.parents[0], ctx.parents[1]);
            let full = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(ctx.grad.shape(), f);
            let (ga, gb) = match kind {
                Binary::Add => (ctx.grad.clone(), ctx.grad.clone()),
                Binary::Sub => (ctx.grad.clone(), ctx.grad.map(|v| -v)),
                Binary::Mul => {
                    let ga = if ctx.needs[0] { full(&|i| g[i] * xb.data()[ib.at(i)]) } else { Tensor::scalar(0.0) };
                    let gb = if ctx.needs[1] { full(&|i| g[i] * xa.data()[ia.at(i)]) } else { Tensor::scalar(0.0) };
                    (ga, gb)
                }
                Binary::Div => {
                    let ga = if ctx.needs[0] { full(&|i| g[i] / xb.data()[ib.at(i)]) } else { Tensor::scalar(0.0) };
                    let gb = if ctx.needs[1] {
                        full(&|i| {
                            let y = xb.data()[ib.at(i)];
                            -g[i] * xa.data()[ia.at(i)] / (y * y)
                        })
                    } else {
                        Tensor::scalar(0.0)
                    };
                    (ga, gb)
                }
            };
            vec![
                ctx.needs[0].then(|| reduce_to_shape(&ga, xa.shape())),
                ctx.needs[1].then(|| reduce_to_shape(&gb, xb.shape())),
            ]
        });
        Ok(self.push(value, &[a, b], backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise map with derivative `dfdx(x, y)` where `y = f(x)`.
    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, dfdx: fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(
            value,
            &[a],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let y = ctx.out.data();
                let g = ctx.grad.data();
                vec![Some(Tensor::from_fn(ctx.grad.shape(), |i| g[i] * dfdx(x[i], y[i])))]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, &[a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    /// Natural log; errors on non-positive input.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| !(x > 0.0)) {
            return Err(NumError::Domain(format!("ln of {} at index {i}", self.value(a).data()[i])));
        }
        Ok(self.unary(a, f64::ln, |x, _| 1.0 / x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// Elementwise log-gamma; the derivative is digamma.
    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| !(x > 0.0)) {
            return Err(NumError::Domain(format!("lgamma of {} at index {i}", self.value(a).data()[i])));
        }
        Ok(self.unary(a, special::lgamma_unchecked, |x, _| special::digamma_unchecked(x)))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
