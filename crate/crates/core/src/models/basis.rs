use crate::error::{Error, Result};

/// Time-varying part of the GSM design: values and time derivatives.
pub trait TimeBasis: Send + Sync {
    fn n_basis(&self) -> usize;

    fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>);
}

/// `x(t) = t`. With a positive coefficient the survival model is a mixed
/// Tobit model for the time itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearTimeBasis;

impl TimeBasis for LinearTimeBasis {
    fn n_basis(&self) -> usize {
        1
    }

    fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        (vec![t], vec![1.0])
    }
}

/// `x(t) = log t`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogTimeBasis;

impl TimeBasis for LogTimeBasis {
    fn n_basis(&self) -> usize {
        1
    }

    fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        (vec![t.ln()], vec![1.0 / t])
    }
}

/// Monotone I-splines in `log t`. Every function rises from 0 to 1 across
/// the boundary knots, so non-negative coefficients give a non-decreasing
/// `x(t)ᵀβ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ISplineBasis {
    knots: Vec<f64>,
    order: usize,
}

impl ISplineBasis {
    /// `order` is that of the underlying M-splines (3 gives quadratic
    /// pieces). Knots are on the log-time scale.
    pub fn new(interior: &[f64], lower: f64, upper: f64, order: usize) -> Result<Self> {
        if order == 0 || !(lower < upper) {
            return Err(Error::InvalidInput(format!("order {order}, boundary [{lower}, {upper}]")));
        }
        if interior.windows(2).any(|w| !(w[0] < w[1])) || interior.iter().any(|&k| !(k > lower && k < upper)) {
            return Err(Error::InvalidInput("interior knots must increase strictly inside the boundary".into()));
        }
        let p = order + 1;
        let mut knots = vec![lower; p];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(upper, p));
        Ok(Self { knots, order })
    }

    /// Boundary knots at the extreme log times and `n_interior` knots at
    /// equally spaced quantiles of the log event times.
    pub fn from_times(times: &[f64], events: &[bool], n_interior: usize, order: usize) -> Result<Self> {
        let mut logs: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        if logs.iter().any(|v| !v.is_finite()) || logs.is_empty() {
            return Err(Error::InvalidInput("times must be positive".into()));
        }
        logs.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = (logs[0], logs[logs.len() - 1]);
        let mut ev: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(t, _)| t.ln()).collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        let src = if ev.is_empty() { &logs } else { &ev };
        let mut interior = Vec::new();
        for j in 1..=n_interior {
            let q = j as f64 / (n_interior + 1) as f64;
            let pos = q * (src.len() - 1) as f64;
            let (a, f) = (pos.floor() as usize, pos.fract());
            let v = src[a] + f * (src[(a + 1).min(src.len() - 1)] - src[a]);
            if v > lo && v < hi && interior.last().is_none_or(|&l| v > l) {
                interior.push(v);
            }
        }
        Self::new(&interior, lo, hi, order)
    }

    /// B-splines of order `self.order + 1` and their derivatives at `x`.
    fn bsplines(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let t = &self.knots;
        let p = self.order + 1;
        let nk = t.len();
        // order 1: indicator of the span containing x, closed on the right end
        let mut b: Vec<f64> = (0..nk - 1)
            .map(|i| {
                let last = t[i] < t[i + 1] && t[i + 1] == t[nk - 1];
                if (t[i] <= x && x < t[i + 1]) || (last && x == t[nk - 1]) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut lower = b.clone();
        for q in 2..=p {
            lower = b.clone();
            let m = nk - q;
            let mut next = vec![0.0; m];
            for i in 0..m {
                let mut v = 0.0;
                let d1 = t[i + q - 1] - t[i];
                if d1 > 0.0 {
                    v += (x - t[i]) / d1 * b[i];
                }
                let d2 = t[i + q] - t[i + 1];
                if d2 > 0.0 {
                    v += (t[i + q] - x) / d2 * b[i + 1];
                }
                next[i] = v;
            }
            b = next;
        }
        let m = nk - p;
        let mut d = vec![0.0; m];
        for i in 0..m {
            let d1 = t[i + p - 1] - t[i];
            if d1 > 0.0 {
                d[i] += (p - 1) as f64 / d1 * lower[i];
            }
            let d2 = t[i + p] - t[i + 1];
            if d2 > 0.0 {
                d[i] -= (p - 1) as f64 / d2 * lower[i + 1];
            }
        }
        (b, d)
    }
}

impl TimeBasis for ISplineBasis {
    fn n_basis(&self) -> usize {
        self.knots.len() - self.order - 2
    }

    fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_basis();
        let x = t.ln();
        let (lo, hi) = (self.knots[0], self.knots[self.knots.len() - 1]);
        if x < lo {
            return (vec![0.0; n], vec![0.0; n]);
        }
        if x > hi {
            return (vec![1.0; n], vec![0.0; n]);
        }
        let (b, d) = self.bsplines(x);
        // I_j = Σ_{m ≥ j} B_m for j = 1..=n; the j = 0 sum is identically one
        let mut v = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let (mut acc, mut dacc) = (0.0, 0.0);
        for j in (1..=n).rev() {
            acc += b[j];
            dacc += d[j];
            v[j - 1] = acc;
            dv[j - 1] = dacc / t;
        }
        (v, dv)
    }
}
