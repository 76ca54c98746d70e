use std::thread;

use crate::error::{Error, Result};
use crate::gwi::Engine;
use crate::models::{evaluate, loglik_gradient, Cluster, Cutpoints, Family, GradPath, Method, MethodOptions, ModelParams};
use crate::numeric::{central_gradient, cholesky_strict, quasi_newton_minimize, BfgsOptions, MinStatus, Matrix, Vector};
use crate::sequences::sub_seed;

/// How `Σ` is parameterized.
#[derive(Debug, Clone, PartialEq)]
pub enum CovStructure {
    /// Log standard deviations and a correlation matrix `C = LLᵀ` whose
    /// Cholesky rows are normalized unconstrained vectors.
    Full(usize),
    /// Diagonal; entry `i` has the standard deviation of group `groups[i]`.
    Grouped(Vec<usize>),
}

impl CovStructure {
    pub fn dim(&self) -> usize {
        match self {
            CovStructure::Full(k) => *k,
            CovStructure::Grouped(g) => g.len(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            CovStructure::Full(k) => k + k * (k - 1) / 2,
            CovStructure::Grouped(g) => g.iter().max().map_or(0, |m| m + 1),
        }
    }

    pub fn sigma(&self, theta: &[f64]) -> Matrix {
        match self {
            CovStructure::Full(k) => {
                let k = *k;
                let mut l = Matrix::zeros(k, k);
                let mut idx = k;
                for i in 0..k {
                    l[(i, i)] = 1.0;
                    for j in 0..i {
                        l[(i, j)] = theta[idx];
                        idx += 1;
                    }
                    let norm = l.row(i).norm();
                    l.row_mut(i).unscale_mut(norm);
                }
                let d = Matrix::from_diagonal(&Vector::from_fn(k, |i, _| theta[i].exp()));
                let c = &l * l.transpose();
                &d * c * &d
            }
            CovStructure::Grouped(g) => Matrix::from_diagonal(&Vector::from_fn(g.len(), |i, _| (2.0 * theta[g[i]]).exp())),
        }
    }

    /// Parameters of `Σ`; the inverse of `sigma` up to the correlation
    /// parameterization's scale freedom.
    pub fn params(&self, sigma: &Matrix) -> Result<Vec<f64>> {
        match self {
            CovStructure::Full(k) => {
                let k = *k;
                let sd = Vector::from_fn(k, |i, _| sigma[(i, i)].sqrt());
                let c = Matrix::from_fn(k, k, |i, j| sigma[(i, j)] / (sd[i] * sd[j]));
                let l = cholesky_strict(&c)?.lower;
                let mut theta: Vec<f64> = sd.iter().map(|s| s.ln()).collect();
                for i in 0..k {
                    for j in 0..i {
                        theta.push(l[(i, j)] / l[(i, i)]);
                    }
                }
                Ok(theta)
            }
            CovStructure::Grouped(g) => {
                let mut theta = vec![0.0; self.n_params()];
                for (i, &gi) in g.iter().enumerate() {
                    theta[gi] = 0.5 * sigma[(i, i)].ln();
                }
                Ok(theta)
            }
        }
    }

    /// `∂Σ/∂θ_j` for each parameter.
    fn jacobian(&self, theta: &[f64]) -> Vec<Matrix> {
        match self {
            CovStructure::Grouped(g) => (0..self.n_params())
                .map(|p| {
                    let s = self.sigma(theta);
                    Matrix::from_diagonal(&Vector::from_fn(g.len(), |i, _| if g[i] == p { 2.0 * s[(i, i)] } else { 0.0 }))
                })
                .collect(),
            CovStructure::Full(_) => {
                let h = 1e-6;
                let mut t = theta.to_vec();
                (0..theta.len())
                    .map(|j| {
                        t[j] = theta[j] + h;
                        let up = self.sigma(&t);
                        t[j] = theta[j] - h;
                        let dn = self.sigma(&t);
                        t[j] = theta[j];
                        (up - dn) / (2.0 * h)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: Method,
    pub cov: CovStructure,
    /// Entries of `β` kept positive through a log transform.
    pub positive_beta: Vec<usize>,
    /// Relative tolerances for the first and second stage; stage one is
    /// skipped for deterministic methods.
    pub coarse_rel_tol: f64,
    pub fine_rel_tol: f64,
    pub max_samples: u64,
    pub seed: u64,
    pub threads: usize,
    pub bfgs: BfgsOptions,
}

impl FitOptions {
    pub fn new(method: Method, cov: CovStructure) -> Self {
        Self {
            method,
            cov,
            positive_beta: Vec::new(),
            coarse_rel_tol: 1e-2,
            fine_rel_tol: 1e-3,
            max_samples: 200_000,
            seed: 1,
            threads: 1,
            bfgs: BfgsOptions { grad_tol: 1e-4, max_iter: 200, f_rel_tol: 1e-9 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Optimizer coordinates: free `β`, covariance parameters, then log cut
    /// point increments.
    pub theta: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub n_evals: usize,
    pub method: String,
    pub converged: bool,
    /// Standard deviations of `estimates()` across refits with other seeds.
    pub se_over_seeds: Option<Vec<f64>>,
}

impl FitResult {
    pub fn sds(&self) -> Vec<f64> {
        self.params.sigma.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    /// `β` followed by the random-effect standard deviations.
    pub fn estimates(&self) -> Vec<f64> {
        self.params.beta.iter().copied().chain(self.sds()).collect()
    }
}

/// Layout of the optimizer vector for one family.
struct Layout {
    family: Family,
    n_beta: usize,
    /// Multinomial: the first column of `B` is fixed at zero.
    fixed_leading: usize,
    positive: Vec<usize>,
    cov: CovStructure,
    n_cut: usize,
}

impl Layout {
    fn n_free_beta(&self) -> usize {
        self.n_beta - self.fixed_leading
    }

    fn len(&self) -> usize {
        self.n_free_beta() + self.cov.n_params() + self.n_cut
    }

    fn params(&self, theta: &[f64]) -> Result<ModelParams> {
        let nb = self.n_free_beta();
        let mut beta = Vector::zeros(self.n_beta);
        for j in 0..nb {
            let b = self.fixed_leading + j;
            beta[b] = if self.positive.contains(&b) { theta[j].exp() } else { theta[j] };
        }
        let nc = self.cov.n_params();
        let sigma = self.cov.sigma(&theta[nb..nb + nc]);
        let mut g = Vec::with_capacity(self.n_cut);
        let mut acc = 0.0;
        for &t in &theta[nb + nc..] {
            acc += t.exp();
            g.push(acc);
        }
        Ok(ModelParams::new(beta, sigma).with_cutpoints(Cutpoints::new(g)?))
    }

    fn theta(&self, p: &ModelParams) -> Result<Vec<f64>> {
        let mut theta = Vec::with_capacity(self.len());
        for b in self.fixed_leading..self.n_beta {
            let v = p.beta[b];
            theta.push(if self.positive.contains(&b) { v.max(1e-8).ln() } else { v });
        }
        theta.extend(self.cov.params(&p.sigma)?);
        let mut prev = 0.0;
        for &g in p.cutpoints.free() {
            theta.push((g - prev).ln());
            prev = g;
        }
        Ok(theta)
    }

    /// Chain rule from `(β, Σ, γ)` to `θ`.
    fn pull_back(&self, theta: &[f64], p: &ModelParams, d_beta: &Vector, d_sigma: &Matrix, d_cut: &Vector) -> Vec<f64> {
        let nb = self.n_free_beta();
        let nc = self.cov.n_params();
        let mut g = vec![0.0; theta.len()];
        for j in 0..nb {
            let b = self.fixed_leading + j;
            g[j] = d_beta[b] * if self.positive.contains(&b) { p.beta[b] } else { 1.0 };
        }
        for (j, dj) in self.cov.jacobian(&theta[nb..nb + nc]).iter().enumerate() {
            g[nb + j] = d_sigma.component_mul(dj).sum();
        }
        // γ_m = Σ_{l ≤ m} exp(θ_l)
        for l in 0..self.n_cut {
            let e = theta[nb + nc + l].exp();
            g[nb + nc + l] = e * d_cut.rows(l, self.n_cut - l).sum();
        }
        g
    }
}

fn layout(clusters: &[Cluster], opts: &FitOptions) -> Result<Layout> {
    let first = clusters.first().ok_or_else(|| Error::InvalidInput("no clusters".into()))?;
    let family = first.family();
    let n_beta = match first {
        Cluster::Multinomial(m) => m.x.ncols() * m.c,
        c => c.n_fixed(),
    };
    let k = first.random_dim();
    for c in clusters {
        if c.family() != family || c.n_fixed() != first.n_fixed() || c.random_dim() != k {
            return Err(Error::DimensionMismatch("clusters differ in family or dimensions".into()));
        }
    }
    if opts.cov.dim() != k {
        return Err(Error::DimensionMismatch(format!("covariance structure has dimension {}, clusters {k}", opts.cov.dim())));
    }
    let (fixed_leading, n_cut) = match first {
        Cluster::Multinomial(m) => (m.x.ncols(), 0),
        Cluster::Ordered(o) => (0, o.c.saturating_sub(2)),
        _ => (0, 0),
    };
    Ok(Layout { family, n_beta, fixed_leading, positive: opts.positive_beta.clone(), cov: opts.cov.clone(), n_cut })
}

/// Runs `f` over the clusters on up to `threads` workers and sums in
/// cluster order.
fn par_map<T: Send>(clusters: &[Cluster], threads: usize, f: impl Fn(usize, &Cluster) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.max(1).min(clusters.len());
    if threads <= 1 {
        return clusters.iter().enumerate().map(|(i, c)| f(i, c)).collect();
    }
    let chunk = clusters.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = clusters
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(j, c)| f(ci * chunk + j, c)).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(clusters.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn method_options(method: Method, rel_tol: f64, max_samples: u64, seed: u64) -> MethodOptions {
    let mut o = MethodOptions::default().with_rel_tol(rel_tol).with_max_samples(max_samples).with_seed(seed);
    o.reduce = false;
    if method == Method::Cdf {
        o.cdf.n_replicates = 8;
    }
    o
}

/// Per-cluster options with their own sub-seeds, so that repeated
/// evaluations share random numbers.
fn seeded(n: usize, opts: &MethodOptions) -> Vec<MethodOptions> {
    (0..n)
        .map(|i| {
            let mut o = opts.clone();
            o.cdf.seed = sub_seed(opts.cdf.seed, i as u64);
            o.mc.seed = sub_seed(opts.mc.seed, i as u64);
            o
        })
        .collect()
}

/// Sample sizes chosen once at `params` and then held fixed. With adaptive
/// sizes the objective jumps whenever a cluster crosses to another stage,
/// which stalls the line search; fixed sizes keep it smooth under common
/// random numbers.
fn frozen(clusters: &[Cluster], params: &ModelParams, method: Method, opts: &MethodOptions, threads: usize) -> Result<Vec<MethodOptions>> {
    let per = seeded(clusters.len(), opts);
    par_map(clusters, threads, |i, c| {
        let r = evaluate(&c.build(params)?, method, &per[i])?;
        let mut o = per[i].clone();
        let n = r.n_evals.max(1);
        o.cdf.rel_tol = 0.0;
        o.cdf.abs_tol = 0.0;
        o.cdf.max_samples = n;
        o.mc.rel_tol = 0.0;
        o.mc.max_samples = n;
        Ok(o)
    })
}

/// Total log-likelihood over clusters, each with its own sub-seed.
pub fn total_loglik(clusters: &[Cluster], params: &ModelParams, method: Method, opts: &MethodOptions, threads: usize) -> Result<f64> {
    sum_loglik(clusters, params, method, &seeded(clusters.len(), opts), threads)
}

fn sum_loglik(clusters: &[Cluster], params: &ModelParams, method: Method, per: &[MethodOptions], threads: usize) -> Result<f64> {
    let parts = par_map(clusters, threads, |i, c| evaluate(&c.build(params)?, method, &per[i]).map(|r| r.log_estimate))?;
    Ok(parts.iter().sum())
}

fn sum_grad(
    clusters: &[Cluster],
    params: &ModelParams,
    method: Method,
    per: &[MethodOptions],
    threads: usize,
) -> Result<(f64, Vector, Matrix, Vector)> {
    let parts = par_map(clusters, threads, |i, c| {
        let path = match method {
            Method::Cdf => GradPath::Cdf(per[i].cdf.clone()),
            Method::Gwi(engine) => GradPath::Gwi { engine, opts: per[i].mc.clone() },
        };
        loglik_gradient(c, params, &path)
    })?;
    let mut f = 0.0;
    let mut db = Vector::zeros(params.beta.len());
    let mut ds = Matrix::zeros(params.sigma.nrows(), params.sigma.ncols());
    let mut dc = Vector::zeros(params.cutpoints.free().len());
    for g in parts {
        f += g.value.log_estimate;
        db += g.d_beta;
        ds += g.d_sigma;
        dc += g.d_cutpoints;
    }
    Ok((f, db, ds, dc))
}

fn analytic_gradient(method: Method) -> bool {
    !matches!(method, Method::Gwi(Engine::Laplace) | Method::Gwi(Engine::Ghq(_)))
}

fn minimize_stage(
    clusters: &[Cluster],
    lay: &Layout,
    theta0: &[f64],
    fo: &FitOptions,
    mo: &MethodOptions,
    analytic: bool,
) -> Result<(crate::numeric::Minimum, Option<Error>)> {
    let per = if fo.method.is_stochastic() {
        frozen(clusters, &lay.params(theta0)?, fo.method, mo, fo.threads)?
    } else {
        seeded(clusters.len(), mo)
    };
    let mut first_err = None;
    let value = |theta: &[f64]| -> Result<f64> {
        let p = lay.params(theta)?;
        sum_loglik(clusters, &p, fo.method, &per, fo.threads)
    };
    let min = quasi_newton_minimize(
        |theta| {
            let r = if analytic {
                lay.params(theta).and_then(|p| {
                    let (f, db, ds, dc) = sum_grad(clusters, &p, fo.method, &per, fo.threads)?;
                    Ok((-f, lay.pull_back(theta, &p, &db, &ds, &dc).iter().map(|v| -v).collect()))
                })
            } else {
                value(theta).map(|f| {
                    let g = central_gradient(|t| value(t).map_or(f64::NAN, |v| -v), theta, 1e-5);
                    (-f, g)
                })
            };
            match r {
                Ok((f, g)) if f.is_finite() => (f, g),
                Ok((_, g)) => (f64::INFINITY, g),
                Err(e) => {
                    first_err.get_or_insert(e);
                    (f64::INFINITY, vec![0.0; theta.len()])
                }
            }
        },
        theta0,
        &fo.bfgs,
    );
    match min {
        Ok(m) => Ok((m, first_err)),
        Err(e) => Err(first_err.unwrap_or(e)),
    }
}

/// Maximizes the summed log marginal likelihood over `β`, the covariance
/// parameters and any cut points. Stochastic methods run a coarse stage
/// first and restart the fine stage from its optimum. A fit that stops
/// without meeting the gradient tolerance is returned with
/// `converged = false`.
pub fn fit_ml(clusters: &[Cluster], start: Option<&ModelParams>, opts: &FitOptions) -> Result<FitResult> {
    let lay = layout(clusters, opts)?;
    let start = match start {
        Some(p) => p.clone(),
        None => default_start(&lay),
    };
    let mut theta = lay.theta(&start)?;
    let mut iterations = 0;
    let mut n_evals = 0;
    let stages: Vec<f64> = if opts.method.is_stochastic() { vec![opts.coarse_rel_tol, opts.fine_rel_tol] } else { vec![opts.fine_rel_tol] };
    let mut last = None;
    for (s, &tol) in stages.iter().enumerate() {
        let mo = method_options(opts.method, tol, opts.max_samples, opts.seed);
        let mut fo = opts.clone();
        if s + 1 < stages.len() {
            fo.bfgs.grad_tol = (opts.bfgs.grad_tol * 10.0).max(1e-3);
        }
        let (mut m, mut err) = minimize_stage(clusters, &lay, &theta, &fo, &mo, analytic_gradient(opts.method))?;
        // the AGHQ gradient holds the mode and scale fixed, so with few nodes
        // it can disagree with the value enough to stall the line search
        if matches!(opts.method, Method::Gwi(Engine::Aghq(_))) && m.status != MinStatus::Converged && m.f.is_finite() {
            let (m2, e2) = minimize_stage(clusters, &lay, &m.x, &fo, &mo, false)?;
            iterations += m.iterations;
            n_evals += m.n_evals;
            (m, err) = (m2, e2);
        }
        if !m.f.is_finite() {
            return Err(err.unwrap_or_else(|| Error::OptimizerFailure("objective not finite".into())));
        }
        iterations += m.iterations;
        n_evals += m.n_evals;
        theta = m.x.clone();
        last = Some(m);
    }
    let m = last.expect("at least one stage");
    let params = lay.params(&theta)?;
    Ok(FitResult {
        params,
        theta,
        log_likelihood: -m.f,
        iterations,
        n_evals,
        method: opts.method.name(),
        converged: m.status == MinStatus::Converged,
        se_over_seeds: None,
    })
}

/// Fits once, then refits the fine stage from that optimum with
/// `n_seeds − 1` other seeds and reports the spread of the estimates.
pub fn fit_over_seeds(clusters: &[Cluster], start: Option<&ModelParams>, opts: &FitOptions, n_seeds: usize) -> Result<FitResult> {
    let mut best = fit_ml(clusters, start, opts)?;
    if n_seeds < 2 || !opts.method.is_stochastic() {
        return Ok(best);
    }
    let mut all = vec![best.estimates()];
    let mut logliks = vec![best.log_likelihood];
    for s in 1..n_seeds {
        let mut o = opts.clone();
        o.seed = sub_seed(opts.seed, 1000 + s as u64);
        o.coarse_rel_tol = o.fine_rel_tol;
        let r = fit_ml(clusters, Some(&best.params), &o)?;
        all.push(r.estimates());
        logliks.push(r.log_likelihood);
    }
    let n = all.len() as f64;
    let sd = (0..all[0].len())
        .map(|j| {
            let mean = all.iter().map(|e| e[j]).sum::<f64>() / n;
            (all.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    best.se_over_seeds = Some(sd);
    Ok(best)
}

fn default_start(lay: &Layout) -> ModelParams {
    let mut beta = Vector::zeros(lay.n_beta);
    for &b in &lay.positive {
        if b < lay.n_beta {
            beta[b] = 1.0;
        }
    }
    let k = lay.cov.dim();
    let sigma = Matrix::identity(k, k) * if lay.family == Family::Gsm { 0.25 } else { 1.0 };
    let cut = Cutpoints::new((1..=lay.n_cut).map(|i| i as f64).collect()).expect("increasing");
    ModelParams::new(beta, sigma).with_cutpoints(cut)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_structure_roundtrip() {
        let s = Matrix::from_row_slice(3, 3, &[2.0, 0.3, -0.4, 0.3, 1.0, 0.2, -0.4, 0.2, 0.5]);
        let cs = CovStructure::Full(3);
        let theta = cs.params(&s).unwrap();
        assert_eq!(theta.len(), 6);
        assert!((cs.sigma(&theta) - &s).amax() < 1e-12);
    }

    #[test]
    fn grouped_structure() {
        let cs = CovStructure::Grouped(vec![0, 0, 1]);
        let s = cs.sigma(&[0.1, -0.3]);
        assert!((s[(1, 1)] - 0.2f64.exp()).abs() < 1e-15);
        let back = cs.params(&s).unwrap();
        assert!((back[0] - 0.1).abs() < 1e-15 && (back[1] + 0.3).abs() < 1e-15);
        let j = cs.jacobian(&[0.1, -0.3]);
        assert!((j[1][(2, 2)] - 2.0 * (-0.6f64).exp()).abs() < 1e-15);
    }
}
