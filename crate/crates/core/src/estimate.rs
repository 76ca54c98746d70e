//! Result type shared by the stochastic and deterministic engines, and the
//! log-domain accumulators behind it.

use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxSamples,
    Exact,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxSamples => "max_samples",
            Status::Exact => "exact",
        }
    }
}

/// An estimate of a positive quantity. `log_estimate` and `rel_std_error`
/// stay meaningful when `estimate` underflows.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxResult {
    pub estimate: f64,
    pub std_error: f64,
    pub log_estimate: f64,
    pub rel_std_error: f64,
    pub n_evals: u64,
    pub elapsed: Duration,
    pub status: Status,
}

impl ApproxResult {
    pub fn exact(log_value: f64, n_evals: u64, elapsed: Duration) -> Self {
        Self {
            estimate: log_value.exp(),
            std_error: 0.0,
            log_estimate: log_value,
            rel_std_error: 0.0,
            n_evals,
            elapsed,
            status: Status::Exact,
        }
    }

    /// Delta-method standard error of `log_estimate`.
    pub fn log_std_error(&self) -> f64 {
        self.rel_std_error
    }
}

/// Running mean and variance of `exp(x_i)` given the `x_i`, shifted by the
/// running maximum so nothing over- or underflows.
#[derive(Debug, Clone)]
pub struct LogMeanAcc {
    shift: f64,
    sum: f64,
    sum_sq: f64,
    n: u64,
}

impl Default for LogMeanAcc {
    fn default() -> Self {
        Self { shift: f64::NEG_INFINITY, sum: 0.0, sum_sq: 0.0, n: 0 }
    }
}

impl LogMeanAcc {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts with a known reference value as the shift.
    pub fn with_shift(shift: f64) -> Self {
        Self { shift, ..Self::default() }
    }

    pub fn push(&mut self, x: f64) {
        self.push_weighted(x, 1.0);
    }

    /// Adds `w·exp(x)` as one observation; `w` may be negative.
    pub fn push_weighted(&mut self, x: f64, w: f64) {
        self.n += 1;
        if x == f64::NEG_INFINITY || w == 0.0 {
            return;
        }
        if x > self.shift + 300.0 || !self.shift.is_finite() {
            self.rescale(x);
        }
        let v = w * (x - self.shift).exp();
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn rescale(&mut self, new_shift: f64) {
        if self.shift.is_finite() {
            let f = (self.shift - new_shift).exp();
            self.sum *= f;
            self.sum_sq *= f * f;
        }
        self.shift = new_shift;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Mean of the observations on the `exp(x − shift)` scale.
    pub fn scaled_mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sum / self.n as f64
    }

    pub fn log_mean(&self) -> f64 {
        let m = self.scaled_mean();
        if m > 0.0 {
            self.shift + m.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Standard error of the mean divided by the mean.
    pub fn rel_std_error(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let m = self.sum / n;
        let var = ((self.sum_sq - n * m * m) / (n - 1.0)).max(0.0);
        if m == 0.0 {
            return f64::INFINITY;
        }
        (var / n).sqrt() / m.abs()
    }
}

/// Combines per-replicate log estimates into mean and standard error.
pub fn combine_log_replicates(logs: &[f64]) -> (f64, f64) {
    let r = logs.len() as f64;
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (m, if r > 1.0 { 0.0 } else { f64::INFINITY });
    }
    let scaled: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / r;
    let var = if r > 1.0 { scaled.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1.0) } else { f64::INFINITY };
    (m + mean.ln(), (var / r).sqrt() / mean)
}
