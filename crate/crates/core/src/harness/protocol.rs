use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::estimate::ApproxResult;
use crate::gwi::{Engine, McOptions};
use crate::models::{evaluate, BuiltLikelihood, Method, MethodOptions};
use crate::sequences::sub_seed;

/// Budgets for the importance-sampling reference value.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthOptions {
    pub base_samples: u64,
    pub max_samples: u64,
    /// Stop once `se_multiplier·SE(log l) < rel_threshold·|log l|`.
    pub rel_threshold: f64,
    pub se_multiplier: f64,
    pub seed: u64,
}

impl GroundTruthOptions {
    /// 10⁵ samples doubling to 10⁶.
    pub fn desk() -> Self {
        Self { base_samples: 100_000, max_samples: 1_000_000, rel_threshold: 2e-4, se_multiplier: 4.0, seed: 1 }
    }

    pub fn paper() -> Self {
        Self { base_samples: 10_000_000, max_samples: 100_000_000, ..Self::desk() }
    }
}

impl Default for GroundTruthOptions {
    fn default() -> Self {
        Self::desk()
    }
}

/// Importance sampling with a fixed sample size that doubles from the base
/// until the precision criterion holds. Fails with `PrecisionNotReached`
/// at the cap; the caller is expected to draw a new instance.
pub fn ground_truth(built: &BuiltLikelihood, opts: &GroundTruthOptions) -> Result<ApproxResult> {
    let mut n = opts.base_samples.max(4);
    loop {
        let mo = MethodOptions { mc: McOptions::fixed(n, opts.seed), ..MethodOptions::default() };
        let r = evaluate(built, Method::Gwi(Engine::Importance), &mo)?;
        if r.rel_std_error == 0.0 || opts.se_multiplier * r.rel_std_error < opts.rel_threshold * r.log_estimate.abs() {
            return Ok(r);
        }
        if n >= opts.max_samples {
            return Err(Error::PrecisionNotReached { estimate: r.log_estimate, std_error: r.rel_std_error, n_evals: r.n_evals });
        }
        n = (2 * n).min(opts.max_samples);
    }
}

/// `sqrt(mean(((l_i − l)/l)²))` for estimates `l_i` of a log-likelihood `l`.
pub fn scaled_rmse(estimates: &[f64], truth: f64) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    let s: f64 = estimates.iter().map(|e| ((e - truth) / truth).powi(2)).sum();
    (s / estimates.len() as f64).sqrt()
}

/// Calibration targets and budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub target: f64,
    /// Seeds per candidate tolerance.
    pub n_runs: usize,
    pub max_samples: u64,
    pub max_nodes: usize,
    /// Halvings of the tolerance before giving up.
    pub max_halvings: usize,
    pub seed: u64,
}

impl CalibrationOptions {
    pub fn desk() -> Self {
        Self { target: 2e-3, n_runs: 20, max_samples: 25_000, max_nodes: 25, max_halvings: 14, seed: 1 }
    }

    pub fn paper() -> Self {
        Self { target: 2e-4, max_samples: 2_500_000, ..Self::desk() }
    }
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self::desk()
    }
}

/// The setting a method was calibrated to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tuning {
    RelTol(f64),
    Nodes(usize),
    Fixed,
}

impl Tuning {
    pub fn describe(&self) -> String {
        match self {
            Tuning::RelTol(t) => format!("rel_tol={t:.3e}"),
            Tuning::Nodes(b) => format!("b={b}"),
            Tuning::Fixed => "fixed".into(),
        }
    }

    /// The method and options a tuning stands for, with `seed`.
    pub fn apply(&self, method: Method, max_samples: u64, seed: u64) -> (Method, MethodOptions) {
        let mut opts = MethodOptions::default().with_max_samples(max_samples).with_seed(seed);
        let method = match (*self, method) {
            (Tuning::RelTol(t), m) => {
                opts = opts.with_rel_tol(t);
                m
            }
            (Tuning::Nodes(b), Method::Gwi(Engine::Aghq(_))) => Method::Gwi(Engine::Aghq(b)),
            (Tuning::Nodes(b), Method::Gwi(Engine::Ghq(_))) => Method::Gwi(Engine::Ghq(b)),
            (_, m) => m,
        };
        (method, opts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub tuning: Tuning,
    pub rmse: f64,
}

fn run_seeds(built: &BuiltLikelihood, method: Method, tuning: Tuning, opts: &CalibrationOptions) -> Result<(Vec<f64>, bool)> {
    let mut logs = Vec::with_capacity(opts.n_runs);
    let mut capped = false;
    for r in 0..opts.n_runs {
        let (m, mo) = tuning.apply(method, opts.max_samples, sub_seed(opts.seed, r as u64));
        let res = evaluate(built, m, &mo)?;
        capped |= res.status == crate::estimate::Status::MaxSamples;
        logs.push(res.log_estimate);
    }
    Ok((logs, capped))
}

/// Smallest-effort setting whose scaled RMSE against `truth` is within the
/// target. Stochastic methods halve the relative tolerance from a loose
/// start; quadrature takes the smallest `b` for which `max(1, b−3)..=b` are
/// all within target.
pub fn calibrate_method(method: Method, built: &BuiltLikelihood, truth: f64, opts: &CalibrationOptions) -> Result<Calibration> {
    let fail = || Error::CannotReachTarget { method: method.name(), target: opts.target };
    match method {
        Method::Gwi(Engine::Aghq(_)) | Method::Gwi(Engine::Ghq(_)) => {
            let mut ok = Vec::with_capacity(opts.max_nodes);
            let mut errs = Vec::with_capacity(opts.max_nodes);
            for b in 1..=opts.max_nodes {
                let (m, mo) = Tuning::Nodes(b).apply(method, opts.max_samples, opts.seed);
                let e = match evaluate(built, m, &mo) {
                    Ok(r) => scaled_rmse(&[r.log_estimate], truth),
                    Err(Error::NodeBudgetExceeded { .. }) => break,
                    Err(e) => return Err(e),
                };
                ok.push(e <= opts.target);
                errs.push(e);
                if ok[b.saturating_sub(4)..].iter().all(|&v| v) {
                    return Ok(Calibration { tuning: Tuning::Nodes(b), rmse: e });
                }
            }
            Err(fail())
        }
        Method::Gwi(Engine::Laplace) => {
            let r = evaluate(built, method, &MethodOptions::default())?;
            let e = scaled_rmse(&[r.log_estimate], truth);
            if e <= opts.target {
                Ok(Calibration { tuning: Tuning::Fixed, rmse: e })
            } else {
                Err(fail())
            }
        }
        _ => {
            // SE(log l) ≈ rel_tol / 3.5 ≈ target·|l| when the tolerance is right
            let mut tol = (8.0 * opts.target * truth.abs()).min(0.5);
            for _ in 0..=opts.max_halvings {
                let (logs, capped) = run_seeds(built, method, Tuning::RelTol(tol), opts)?;
                let e = scaled_rmse(&logs, truth);
                if e <= opts.target {
                    return Ok(Calibration { tuning: Tuning::RelTol(tol), rmse: e });
                }
                if capped {
                    break;
                }
                tol /= 2.0;
            }
            Err(fail())
        }
    }
}

/// Timing of one method on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub method: String,
    pub tuning: Option<Tuning>,
    pub rmse: f64,
    pub median_time: Duration,
    pub mean_time: Duration,
    /// The integral was taken over `Z u` instead of `u`.
    pub reduced: bool,
}

impl BenchCell {
    pub fn failed(&self) -> bool {
        self.tuning.is_none()
    }
}

/// One discarded warm-up run, then `runs` timed ones.
pub fn time_method(built: &BuiltLikelihood, method: Method, opts: &MethodOptions, runs: usize) -> Result<(Duration, Duration)> {
    evaluate(built, method, opts)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(evaluate(built, method, opts)?);
        times.push(t.elapsed());
    }
    times.sort();
    let median = times[times.len() / 2];
    let mean = times.iter().sum::<Duration>() / runs as u32;
    Ok((median, mean))
}

/// Quadrature cells are named without a node count; calibration picks it.
fn family_name(m: Method) -> String {
    match m {
        Method::Gwi(Engine::Aghq(_)) => "aghq".into(),
        Method::Gwi(Engine::Ghq(_)) => "ghq".into(),
        _ => m.name(),
    }
}

/// Calibrates then times each method on one instance. Methods that miss the
/// target get a cell without a tuning.
pub fn benchmark_instance(
    built: &BuiltLikelihood,
    truth: f64,
    methods: &[Method],
    opts: &CalibrationOptions,
    timing_runs: usize,
) -> Result<Vec<BenchCell>> {
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let reduced = matches!(m, Method::Gwi(_)) && built.reduced_gwi().is_some();
        match calibrate_method(m, built, truth, opts) {
            Ok(c) => {
                let (mm, mo) = c.tuning.apply(m, opts.max_samples, opts.seed);
                let (median_time, mean_time) = time_method(built, mm, &mo, timing_runs)?;
                out.push(BenchCell { method: family_name(m), tuning: Some(c.tuning), rmse: c.rmse, median_time, mean_time, reduced });
            }
            Err(Error::CannotReachTarget { .. }) => out.push(BenchCell {
                method: family_name(m),
                tuning: None,
                rmse: f64::NAN,
                median_time: Duration::ZERO,
                mean_time: Duration::ZERO,
                reduced,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Per-method summary over instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub method: String,
    pub median_time: Duration,
    pub mean_time: Duration,
    pub rmse: f64,
    pub failures: usize,
    pub n_instances: usize,
}

/// Median and mean over instances of each method's per-instance mean time,
/// and the root mean of squared RMSEs. Failed cells are only counted.
pub fn summarize(cells: &[Vec<BenchCell>]) -> Vec<CalibrationResult> {
    let Some(first) = cells.first() else { return Vec::new() };
    (0..first.len())
        .map(|j| {
            let ok: Vec<&BenchCell> = cells.iter().map(|r| &r[j]).filter(|c| !c.failed()).collect();
            let mut times: Vec<Duration> = ok.iter().map(|c| c.mean_time).collect();
            times.sort();
            let (median_time, mean_time, rmse) = if ok.is_empty() {
                (Duration::ZERO, Duration::ZERO, f64::NAN)
            } else {
                let n = ok.len();
                let median = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2 };
                let rmse = (ok.iter().map(|c| c.rmse * c.rmse).sum::<f64>() / n as f64).sqrt();
                (median, times.iter().sum::<Duration>() / n as u32, rmse)
            };
            CalibrationResult {
                method: first[j].method.clone(),
                median_time,
                mean_time,
                rmse,
                failures: cells.len() - ok.len(),
                n_instances: cells.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_of_constant_error() {
        let truth = -3.7;
        let e = 0.01;
        let logs = vec![truth + e; 20];
        assert!((scaled_rmse(&logs, truth) - (e / truth).abs()).abs() < 1e-15);
        let mixed = [truth + e, truth - e];
        assert!((scaled_rmse(&mixed, truth) - (e / truth).abs()).abs() < 1e-15);
    }

    #[test]
    fn summary_counts_failures() {
        let ok = BenchCell {
            method: "cdf".into(),
            tuning: Some(Tuning::RelTol(1e-3)),
            rmse: 1e-3,
            median_time: Duration::from_millis(2),
            mean_time: Duration::from_millis(3),
            reduced: false,
        };
        let bad = BenchCell { tuning: None, rmse: f64::NAN, ..ok.clone() };
        let s = summarize(&[vec![ok.clone()], vec![bad], vec![ok]]);
        assert_eq!(s[0].failures, 1);
        assert_eq!(s[0].median_time, Duration::from_millis(3));
        assert!((s[0].rmse - 1e-3).abs() < 1e-15);
    }
}
