use crate::tensor::numel;
use crate::{NumError, Result, Tape, Tensor, Var};

/// Row-major matrix view with optional logical transpose.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl Mat<'_> {
    /// (row stride, col stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            // stored as cols x rows
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a @ b` (or `c += a @ b` when `accumulate`).
fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(c.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked against the logical dimensions and
    // strides above describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or `[..., k, n]`
    /// with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NumError::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(NumError::shape("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let am = Mat { data: &da[i * m * k..(i + 1) * m * k], rows: m, cols: k, transposed: false };
                let boff = if shared_b { 0 } else { i * k * n };
                let bm = Mat { data: &db[boff..boff + k * n], rows: k, cols: n, transposed: false };
                gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (da, db) = (ctx.parents[0].data(), ctx.parents[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gm = Mat { data: &g[i * m * n..(i + 1) * m * n], rows: m, cols: n, transposed: false };
                        let boff = if shared_b { 0 } else { i * k * n };
                        let bt = Mat { data: &db[boff..boff + k * n], rows: n, cols: k, transposed: true };
                        gemm(gm, bt, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                    Tensor::new(ctx.parents[0].shape(), ga).expect("matmul grad shape")
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; if shared_b { k * n } else { batch * k * n }];
                    for i in 0..batch {
                        let at = Mat { data: &da[i * m * k..(i + 1) * m * k], rows: k, cols: m, transposed: true };
                        let gm = Mat { data: &g[i * m * n..(i + 1) * m * n], rows: m, cols: n, transposed: false };
                        if shared_b {
                            gemm(at, gm, &mut gb, i > 0);
                        } else {
                            gemm(at, gm, &mut gb[i * k * n..(i + 1) * k * n], false);
                        }
                    }
                    Tensor::new(ctx.parents[1].shape(), gb).expect("matmul grad shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(NumError::InvalidArgument(format!(
                "transpose needs at least 2 axes, got shape {:?}",
                self.shape(a)
            )));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }
}
