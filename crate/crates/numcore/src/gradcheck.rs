//! Central finite-difference gradient checking.
//!
//! Used by tests across the workspace as an oracle that never touches the
//! backward rules it validates.

use crate::{Result, Tape, Tensor, Var};

/// Relative error with an absolute floor, so that gradients which are
/// zero analytically are compared against round-off rather than divided by it.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare backprop gradients of a scalar-valued `f` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_elements(inputs, h, usize::MAX, f)
}

/// Like [`check`], but probes at most `max_per_input` evenly spaced elements
/// of each input.
pub fn check_elements<F>(inputs: &[Tensor], h: f64, max_per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out = if tape.value(out).len() == 1 { out } else { tape.sum(out) };
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ii], input.shape());
        let n = input.len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let x0 = input.data()[e];
            probe[ii].data_mut()[e] = x0 + h;
            let fp = eval(&probe)?;
            probe[ii].data_mut()[e] = x0 - h;
            let fm = eval(&probe)?;
            probe[ii].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport { max_rel_error: err, worst: (ii, e), analytic: a, numeric, ..report };
            }
        }
    }
    Ok(report)
}
