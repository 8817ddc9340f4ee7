//! Student-t likelihood, point metrics, prediction intervals and error
//! distribution diagnostics.

use numcore::special::{lgamma, student_t_cdf, student_t_quantile};
use numcore::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::features::NormStats;
use crate::model::TDistForecast;
use crate::{Error, Result};

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    match tape.value(v).data().iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", tape.value(v).data()[i]))),
        None => Ok(()),
    }
}

/// Mean Student-t negative log-likelihood over all elements.
///
/// `(ν+1)/2·ln(1 + r²/(νσ²)) + ½·ln(νσ²π) + lnΓ(ν/2) − lnΓ((ν+1)/2)` with
/// `r = y − ŷ`.
pub fn t_nll(tape: &mut Tape, mean: Var, scale2: Var, df: Var, target: Var) -> Result<Var> {
    for (v, what) in [(mean, "mean"), (scale2, "scale2"), (df, "df"), (target, "target")] {
        check_finite(tape, v, what)?;
    }
    let shape = tape.shape(mean).to_vec();
    for (v, what) in [(scale2, "scale2"), (df, "df"), (target, "target")] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::Invalid(format!("t_nll: {what} shape {:?} differs from mean {shape:?}", tape.shape(v))));
        }
    }
    let r = tape.sub(target, mean)?;
    let r2 = tape.square(r);
    let nu_s2 = tape.mul(df, scale2)?;
    let q = tape.div(r2, nu_s2)?;
    let q1 = tape.add_scalar(q, 1.0);
    let log_q = tape.ln(q1)?;
    let half_nu1 = {
        let t = tape.add_scalar(df, 1.0);
        tape.mul_scalar(t, 0.5)
    };
    let term1 = tape.mul(half_nu1, log_q)?;
    let scaled = tape.mul_scalar(nu_s2, std::f64::consts::PI);
    let log_s = tape.ln(scaled)?;
    let term2 = tape.mul_scalar(log_s, 0.5);
    let half_nu = tape.mul_scalar(df, 0.5);
    let lg_a = tape.lgamma(half_nu)?;
    let lg_b = tape.lgamma(half_nu1)?;
    let term3 = tape.sub(lg_a, lg_b)?;
    let s = tape.add(term1, term2)?;
    let s = tape.add(s, term3)?;
    Ok(tape.mean(s))
}

/// Per-element t-NLL on plain values.
pub fn t_nll_value(y: f64, mean: f64, scale2: f64, df: f64) -> Result<f64> {
    let r2 = (y - mean) * (y - mean);
    Ok((df + 1.0) / 2.0 * (r2 / (df * scale2)).ln_1p()
        + 0.5 * (df * scale2 * std::f64::consts::PI).ln()
        + lgamma(df / 2.0)?
        - lgamma((df + 1.0) / 2.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub count: usize,
}

pub const MAPE_EPSILON_MPH: f64 = 1.0;

/// RMSE, MAE and MAPE (%) with denominator `max(|y|, epsilon)`.
pub fn point_metrics(y: &[f64], yhat: &[f64], epsilon: f64) -> Result<PointMetrics> {
    if y.len() != yhat.len() {
        return Err(Error::Invalid(format!("point_metrics: {} targets vs {} predictions", y.len(), yhat.len())));
    }
    let n = y.len();
    if n == 0 {
        return Ok(PointMetrics { rmse: 0.0, mae: 0.0, mape: 0.0, count: 0 });
    }
    let (mut se, mut ae, mut pe) = (0.0, 0.0, 0.0);
    for (&a, &p) in y.iter().zip(yhat) {
        let e = (a - p).abs();
        se += e * e;
        ae += e;
        pe += e / a.abs().max(epsilon);
    }
    let nf = n as f64;
    Ok(PointMetrics { rmse: (se / nf).sqrt(), mae: ae / nf, mape: 100.0 * pe / nf, count: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: String,
    pub metrics: PointMetrics,
}

pub const SPEED_BINS: [(f64, f64, &str); 4] =
    [(0.0, 20.0, "0-20"), (20.0, 40.0, "20-40"), (40.0, 60.0, "40-60"), (60.0, f64::INFINITY, ">60")];

/// Point metrics grouped by the observed speed.
pub fn binned_metrics(y: &[f64], yhat: &[f64], epsilon: f64) -> Result<Vec<BinMetrics>> {
    if y.len() != yhat.len() {
        return Err(Error::Invalid(format!("binned_metrics: {} targets vs {} predictions", y.len(), yhat.len())));
    }
    SPEED_BINS
        .iter()
        .map(|&(lo, hi, label)| {
            let (a, p): (Vec<f64>, Vec<f64>) =
                y.iter().zip(yhat).filter(|(&v, _)| v >= lo && v < hi).map(|(&v, &q)| (v, q)).unzip();
            Ok(BinMetrics { bin: label.to_string(), metrics: point_metrics(&a, &p, epsilon)? })
        })
        .collect()
}

/// Forecast in mph from one in normalized speed units.
pub fn denormalize_forecast(fc: &TDistForecast, stats: &NormStats) -> TDistForecast {
    let range = stats.speed_range();
    TDistForecast {
        shape: fc.shape,
        mean: fc.mean.iter().map(|&m| stats.denormalize_speed(m)).collect(),
        scale2: fc.scale2.iter().map(|&s| s * range * range).collect(),
        df: fc.df.clone(),
    }
}

/// Central `1 − alpha` bounds `ŷ ± t_{1−α/2}(ν)·σ`.
pub fn intervals(fc: &TDistForecast, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let p = 1.0 - alpha / 2.0;
    let mut lo = Vec::with_capacity(fc.mean.len());
    let mut hi = Vec::with_capacity(fc.mean.len());
    let mut cache: Option<(f64, f64)> = None;
    for ((&m, &s2), &nu) in fc.mean.iter().zip(&fc.scale2).zip(&fc.df) {
        let q = match cache {
            Some((d, q)) if d == nu => q,
            _ => {
                let q = student_t_quantile(p, nu)?;
                cache = Some((nu, q));
                q
            }
        };
        let half = q * s2.sqrt();
        lo.push(m - half);
        hi.push(m + half);
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub alpha: f64,
    pub mpiw_by_horizon: Vec<f64>,
    pub picp_by_horizon: Vec<f64>,
    pub mpiw: f64,
    pub picp: f64,
}

/// Mean interval width and coverage, overall and per horizon label.
pub fn interval_eval(lo: &[f64], hi: &[f64], y: &[f64], horizons: &[usize], n_horizons: usize, alpha: f64) -> Result<IntervalReport> {
    let n = y.len();
    if lo.len() != n || hi.len() != n || horizons.len() != n {
        return Err(Error::Invalid("interval_eval: inputs differ in length".into()));
    }
    let mut width = vec![0.0; n_horizons];
    let mut hits = vec![0usize; n_horizons];
    let mut count = vec![0usize; n_horizons];
    for i in 0..n {
        if lo[i] > hi[i] {
            return Err(Error::Invalid(format!("interval {i} has lower bound {} above upper {}", lo[i], hi[i])));
        }
        let k = horizons[i];
        if k >= n_horizons {
            return Err(Error::Invalid(format!("horizon label {k} >= {n_horizons}")));
        }
        width[k] += hi[i] - lo[i];
        count[k] += 1;
        if lo[i] <= y[i] && y[i] <= hi[i] {
            hits[k] += 1;
        }
    }
    let ratio = |a: f64, c: usize| if c == 0 { 0.0 } else { a / c as f64 };
    let total = n.max(1) as f64;
    Ok(IntervalReport {
        alpha,
        mpiw_by_horizon: (0..n_horizons).map(|k| ratio(width[k], count[k])).collect(),
        picp_by_horizon: (0..n_horizons).map(|k| ratio(hits[k] as f64, count[k])).collect(),
        mpiw: width.iter().sum::<f64>() / total,
        picp: hits.iter().sum::<usize>() as f64 / total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TFit {
    pub df: f64,
    pub loc: f64,
    pub scale: f64,
    pub log_likelihood: f64,
    pub ks_statistic: f64,
    pub n: usize,
    /// `(theoretical, sample)` quantile pairs.
    #[serde(skip)]
    pub qq: Vec<(f64, f64)>,
}

pub const MIN_FIT_SAMPLES: usize = 100;
const DF_BOUNDS: (f64, f64) = (0.3, 1e4);
const QQ_POINTS: usize = 500;

/// EM for location and scale at fixed df, warm-started from `(loc, scale2)`.
fn em_loc_scale(x: &[f64], df: f64, mut loc: f64, mut s2: f64) -> (f64, f64) {
    let n = x.len() as f64;
    for _ in 0..200 {
        let (mut sw, mut swx) = (0.0, 0.0);
        let w: Vec<f64> = x.iter().map(|&v| (df + 1.0) / (df + (v - loc) * (v - loc) / s2)).collect();
        for (&wi, &v) in w.iter().zip(x) {
            sw += wi;
            swx += wi * v;
        }
        let new_loc = swx / sw;
        let new_s2 = (w.iter().zip(x).map(|(&wi, &v)| wi * (v - new_loc) * (v - new_loc)).sum::<f64>() / n).max(1e-300);
        let done = (new_loc - loc).abs() <= 1e-12 * (1.0 + loc.abs()) && (new_s2 / s2 - 1.0).abs() <= 1e-12;
        loc = new_loc;
        s2 = new_s2;
        if done {
            break;
        }
    }
    (loc, s2)
}

fn t_loglik(x: &[f64], df: f64, loc: f64, s2: f64) -> f64 {
    let n = x.len() as f64;
    let c = lgamma((df + 1.0) / 2.0).unwrap_or(f64::NAN) - lgamma(df / 2.0).unwrap_or(f64::NAN)
        - 0.5 * (df * std::f64::consts::PI * s2).ln();
    n * c - (df + 1.0) / 2.0 * x.iter().map(|&v| ((v - loc) * (v - loc) / (df * s2)).ln_1p()).sum::<f64>()
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Maximum-likelihood location-scale Student-t fit with K-S and Q-Q data.
///
/// df is found by golden-section search on the profile likelihood over
/// `ln df`; location and scale come from EM at each trial df.
pub fn fit_t_errors(errors: &[f64]) -> Result<TFit> {
    if errors.len() < MIN_FIT_SAMPLES {
        return Err(Error::Invalid(format!("need at least {MIN_FIT_SAMPLES} errors, got {}", errors.len())));
    }
    if let Some(i) = errors.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("errors[{i}]")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    if iqr == 0.0 {
        return Err(Error::Invalid("errors have zero spread".into()));
    }
    let mut start = (median, (iqr / 1.349).powi(2));

    let mut profile = |log_df: f64| {
        let df = log_df.exp();
        let (loc, s2) = em_loc_scale(errors, df, start.0, start.1);
        start = (loc, s2);
        (t_loglik(errors, df, loc, s2), loc, s2)
    };
    let (mut a, mut b) = (DF_BOUNDS.0.ln(), DF_BOUNDS.1.ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = profile(c).0;
    let mut fd = profile(d).0;
    while b - a > 1e-6 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = profile(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = profile(d).0;
        }
    }
    let log_df = (a + b) / 2.0;
    let (ll, loc, s2) = profile(log_df);
    let df = log_df.exp();
    let scale = s2.sqrt();

    let n = sorted.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        let f = student_t_cdf((v - loc) / scale, df)?;
        ks = ks.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let m = sorted.len().min(QQ_POINTS);
    let qq = (0..m)
        .map(|k| {
            let p = (k as f64 + 0.5) / m as f64;
            Ok((loc + scale * student_t_quantile(p, df)?, quantile_sorted(&sorted, p)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TFit { df, loc, scale, log_likelihood: ll, ks_statistic: ks, n: sorted.len(), qq })
}
