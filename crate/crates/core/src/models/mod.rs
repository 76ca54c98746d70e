//! Cluster likelihoods for the four probit families. Each build returns the
//! constant `log c(y)`, the joint normal block for the CDF form and the
//! Gaussian-weighted integral, so that
//! `log L = log c + log P(ℓ < V₂ ≤ v₂) = log c + log ∫ φ(u) h(u) du`.

mod basis;
mod gradient;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use basis::{ISplineBasis, LinearTimeBasis, LogTimeBasis, TimeBasis};
pub use gradient::{loglik_gradient, GradPath, LoglikGrad};

use crate::error::{Error, Result};
use crate::estimate::ApproxResult;
use crate::gwi::{self, Engine, GwiProblem, LogIntegrand, McOptions, MultinomialRows, ProbitRows, Term, UnitIntegrand};
use crate::mvn_cdf::CdfOptions;
use crate::numeric::{cholesky, cholesky_strict, symmetrize, Matrix, Vector, LN_SQRT_2PI};
use crate::skewlink::{marginal_cdf, SkewParams};

/// Inner quadrature nodes of the multinomial integrand.
pub const MULTINOMIAL_NODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Binomial,
    Multinomial,
    Ordered,
    Gsm,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Binomial => "binomial",
            Family::Multinomial => "multinomial",
            Family::Ordered => "ordered",
            Family::Gsm => "gsm",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(Family::Binomial),
            "multinomial" => Ok(Family::Multinomial),
            "ordered" => Ok(Family::Ordered),
            "gsm" => Ok(Family::Gsm),
            _ => Err(Error::InvalidInput(format!("unknown family '{s}'"))),
        }
    }
}

/// `y_i` successes out of `m_i` trials with `P = Φ(x_iᵀβ + z_iᵀu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinomialCluster {
    pub y: Vec<u32>,
    pub m: Vec<u32>,
    pub x: Matrix,
    pub z: Matrix,
}

/// `y_i = argmax_k (x_iᵀβ_k + z_{ik}ᵀu + ε_{ik})`, categories from 1.
/// `z[i]` is `c × K` with one row per category.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialCluster {
    pub y: Vec<usize>,
    pub c: usize,
    pub x: Matrix,
    pub z: Vec<Matrix>,
}

/// `y_i = k` when `γ_{k−1} < x_iᵀβ + z_iᵀu + ε_i ≤ γ_k`, categories from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedCluster {
    pub y: Vec<usize>,
    pub c: usize,
    pub x: Matrix,
    pub z: Matrix,
}

/// Survival `S(t | u) = Φ(−x(t)ᵀβ − zᵀu)`. Rows of `x` and `dx` hold
/// `x(t_i)` and `x′(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GsmCluster {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub x: Matrix,
    pub dx: Matrix,
    pub z: Matrix,
}

impl GsmCluster {
    /// `x(t) = (basis(t), covariates)`.
    pub fn from_basis(time: Vec<f64>, event: Vec<bool>, covariates: &Matrix, z: Matrix, basis: &dyn TimeBasis) -> Result<Self> {
        let n = time.len();
        if event.len() != n || covariates.nrows() != n || z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} times, {} events, {} covariate rows, {} z rows",
                event.len(),
                covariates.nrows(),
                z.nrows()
            )));
        }
        let q = basis.n_basis();
        let p = q + covariates.ncols();
        let mut x = Matrix::zeros(n, p);
        let mut dx = Matrix::zeros(n, p);
        for (i, &t) in time.iter().enumerate() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput(format!("time {t} at row {i} is not positive")));
            }
            let (v, d) = basis.eval(t);
            for j in 0..q {
                x[(i, j)] = v[j];
                dx[(i, j)] = d[j];
            }
            for j in 0..covariates.ncols() {
                x[(i, q + j)] = covariates[(i, j)];
            }
        }
        Ok(Self { time, event, x, dx, z })
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }
}

/// Ordered-model cut points `0 = γ₁ < γ₂ < … < γ_{c−1}`. Only the free
/// values from `γ₂` on are stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cutpoints(Vec<f64>);

impl Cutpoints {
    pub fn new(free: Vec<f64>) -> Result<Self> {
        let mut prev = 0.0;
        for (i, &g) in free.iter().enumerate() {
            if !(g > prev && g.is_finite()) {
                return Err(Error::InvalidInput(format!("cut point γ{} = {g} does not exceed {prev}", i + 2)));
            }
            prev = g;
        }
        Ok(Self(free))
    }

    pub fn free(&self) -> &[f64] {
        &self.0
    }

    pub fn n_categories(&self) -> usize {
        self.0.len() + 2
    }

    /// `γ_k` for `k = 0..=c` with `γ₀ = −∞`, `γ₁ = 0` and `γ_c = ∞`.
    pub fn bound(&self, k: usize) -> f64 {
        match k {
            0 => f64::NEG_INFINITY,
            1 => 0.0,
            k if k - 2 < self.0.len() => self.0[k - 2],
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Fixed effects. For the multinomial family, the `p × c` matrix `B`
    /// stored column by column.
    pub beta: Vector,
    pub sigma: Matrix,
    pub cutpoints: Cutpoints,
}

impl ModelParams {
    pub fn new(beta: Vector, sigma: Matrix) -> Self {
        Self { beta, sigma, cutpoints: Cutpoints::default() }
    }

    pub fn with_cutpoints(mut self, cutpoints: Cutpoints) -> Self {
        self.cutpoints = cutpoints;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cluster {
    Binomial(BinomialCluster),
    Multinomial(MultinomialCluster),
    Ordered(OrderedCluster),
    Gsm(GsmCluster),
}

impl Cluster {
    pub fn family(&self) -> Family {
        match self {
            Cluster::Binomial(_) => Family::Binomial,
            Cluster::Multinomial(_) => Family::Multinomial,
            Cluster::Ordered(_) => Family::Ordered,
            Cluster::Gsm(_) => Family::Gsm,
        }
    }

    pub fn n_obs(&self) -> usize {
        match self {
            Cluster::Binomial(c) => c.y.len(),
            Cluster::Multinomial(c) => c.y.len(),
            Cluster::Ordered(c) => c.y.len(),
            Cluster::Gsm(c) => c.time.len(),
        }
    }

    /// Dimension `K` of the random effect.
    pub fn random_dim(&self) -> usize {
        match self {
            Cluster::Binomial(c) => c.z.ncols(),
            Cluster::Multinomial(c) => c.z.first().map_or(0, |z| z.ncols()),
            Cluster::Ordered(c) => c.z.ncols(),
            Cluster::Gsm(c) => c.z.ncols(),
        }
    }

    /// Columns of the fixed-effect design.
    pub fn n_fixed(&self) -> usize {
        match self {
            Cluster::Binomial(c) => c.x.ncols(),
            Cluster::Multinomial(c) => c.x.ncols(),
            Cluster::Ordered(c) => c.x.ncols(),
            Cluster::Gsm(c) => c.x.ncols(),
        }
    }

    pub fn build(&self, params: &ModelParams) -> Result<BuiltLikelihood> {
        match self {
            Cluster::Binomial(c) => build_binomial(c, &params.beta, &params.sigma),
            Cluster::Multinomial(c) => {
                let p = c.x.ncols();
                if params.beta.len() != p * c.c {
                    return Err(Error::DimensionMismatch(format!("B has {} entries, expected {p}x{}", params.beta.len(), c.c)));
                }
                build_multinomial(c, &Matrix::from_column_slice(p, c.c, params.beta.as_slice()), &params.sigma)
            }
            Cluster::Ordered(c) => build_ordered(c, &params.beta, &params.cutpoints, &params.sigma),
            Cluster::Gsm(c) => build_gsm(c, &params.beta, &params.sigma),
        }
    }
}

/// `log L = log_c + log P(ℓ < V₂ ≤ v₂)`, with the probability also given
/// as the integral `gwi`. `skew` is `None` when `k₂ = 0` and the
/// probability is one.
#[derive(Debug, Clone)]
pub struct BuiltLikelihood {
    pub log_c: f64,
    pub skew: Option<SkewParams>,
    pub gwi: GwiProblem,
}

/// Adds a constant to a log-scale estimate.
fn shift_log(mut r: ApproxResult, c: f64) -> ApproxResult {
    r.log_estimate += c;
    r.estimate = r.log_estimate.exp();
    r.std_error = r.rel_std_error * r.estimate;
    r
}

impl BuiltLikelihood {
    pub fn k2(&self) -> usize {
        self.skew.as_ref().map_or(0, |s| s.k2())
    }

    pub fn random_dim(&self) -> usize {
        self.gwi.dim()
    }

    pub fn log_marginal_cdf(&self, opts: &CdfOptions) -> Result<ApproxResult> {
        match &self.skew {
            Some(sp) => Ok(shift_log(marginal_cdf(sp, opts)?, self.log_c)),
            None => Ok(ApproxResult::exact(self.log_c, 0, Default::default())),
        }
    }

    pub fn log_marginal_gwi(&self, engine: Engine, opts: &McOptions) -> Result<ApproxResult> {
        Ok(shift_log(gwi::estimate(&self.gwi, engine, opts)?, self.log_c))
    }

    /// The integral over `Z u` when that has fewer dimensions than `u`.
    pub fn reduced_gwi(&self) -> Option<GwiProblem> {
        gwi::reduce_gwi_dimension(&self.gwi).ok()
    }
}

/// An approximation of the log marginal likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Cdf,
    Gwi(Engine),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Cdf => "cdf".into(),
            Method::Gwi(Engine::Ghq(b)) => format!("ghq{b}"),
            Method::Gwi(Engine::Aghq(b)) => format!("aghq{b}"),
            Method::Gwi(e) => e.name().into(),
        }
    }

    /// Parses `cdf`, `laplace`, `importance`, `spherical_radial`, `rqmc`,
    /// `ghq`, `aghq`; quadrature names take `nodes`.
    pub fn parse(s: &str, nodes: usize) -> Result<Self> {
        Ok(match s {
            "cdf" => Method::Cdf,
            "laplace" => Method::Gwi(Engine::Laplace),
            "importance" | "is" => Method::Gwi(Engine::Importance),
            "spherical_radial" | "sr" => Method::Gwi(Engine::SphericalRadial),
            "rqmc" => Method::Gwi(Engine::Rqmc),
            "ghq" => Method::Gwi(Engine::Ghq(nodes)),
            "aghq" => Method::Gwi(Engine::Aghq(nodes)),
            _ => return Err(Error::InvalidInput(format!("unknown method '{s}'"))),
        })
    }

    pub fn is_stochastic(&self) -> bool {
        match self {
            Method::Cdf => true,
            Method::Gwi(e) => e.is_stochastic(),
        }
    }
}

/// Tolerances for every method, plus whether to integrate over `Z u` when
/// that lowers the dimension.
#[derive(Debug, Clone)]
pub struct MethodOptions {
    pub cdf: CdfOptions,
    pub mc: McOptions,
    pub reduce: bool,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self { cdf: CdfOptions::default(), mc: McOptions::default(), reduce: true }
    }
}

impl MethodOptions {
    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.cdf.rel_tol = rel_tol;
        self.mc.rel_tol = rel_tol;
        self
    }

    pub fn with_max_samples(mut self, n: u64) -> Self {
        self.cdf.max_samples = n;
        self.mc.max_samples = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.cdf.seed = seed;
        self.mc.seed = seed;
        self
    }
}

/// Log marginal likelihood of one built cluster.
pub fn evaluate(built: &BuiltLikelihood, method: Method, opts: &MethodOptions) -> Result<ApproxResult> {
    match method {
        Method::Cdf => built.log_marginal_cdf(&opts.cdf),
        Method::Gwi(engine) => {
            let reduced = if opts.reduce { built.reduced_gwi() } else { None };
            match reduced {
                Some(p) => Ok(shift_log(gwi::estimate(&p, engine, &opts.mc)?, built.log_c)),
                None => built.log_marginal_gwi(engine, &opts.mc),
            }
        }
    }
}

fn check_sigma(sigma: &Matrix, k: usize) -> Result<()> {
    if sigma.shape() != (k, k) {
        return Err(Error::DimensionMismatch(format!("Σ is {:?}, random effect has dimension {k}", sigma.shape())));
    }
    if k == 0 {
        return Err(Error::BadDimension("no random effects".into()));
    }
    cholesky_strict(sigma).map(|_| ())
}

fn check_rows(n: usize, what: &[(&str, usize)]) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("empty cluster".into()));
    }
    for (name, len) in what {
        if *len != n {
            return Err(Error::DimensionMismatch(format!("{name} has {len} rows, expected {n}")));
        }
    }
    Ok(())
}

/// `log φ(u; 0, Σ)`-weighted integral with `h` from `integrand`.
fn prior_gwi(sigma: &Matrix, integrand: Arc<dyn LogIntegrand>) -> Result<GwiProblem> {
    GwiProblem::new(Vector::zeros(sigma.nrows()), sigma.clone(), integrand)
}

/// Block for `V₂ = ε + S U` (`sign = 1`) or `ε − S U` (`sign = −1`) with
/// `U ~ N(0, Σ)` and `ε ~ N(0, Ω)`.
fn additive_block(s: &Matrix, sigma: &Matrix, omega: Matrix, sign: f64, v2: Vector, lower: Option<Vector>) -> Result<SkewParams> {
    let k = sigma.nrows();
    let xi21 = (s * sigma) * sign;
    let mut xi22 = omega + s * sigma * s.transpose();
    symmetrize(&mut xi22);
    SkewParams::new(Vector::zeros(k), Vector::zeros(s.nrows()), sigma.clone(), xi21, xi22, v2, lower)
}

pub fn build_binomial(cl: &BinomialCluster, beta: &Vector, sigma: &Matrix) -> Result<BuiltLikelihood> {
    let n = cl.y.len();
    check_rows(n, &[("m", cl.m.len()), ("x", cl.x.nrows()), ("z", cl.z.nrows())])?;
    if cl.x.ncols() != beta.len() {
        return Err(Error::DimensionMismatch(format!("x has {} columns, β has {}", cl.x.ncols(), beta.len())));
    }
    check_sigma(sigma, cl.z.ncols())?;
    if let Some(i) = (0..n).find(|&i| cl.y[i] > cl.m[i]) {
        return Err(Error::InvalidInput(format!("row {i}: {} successes out of {}", cl.y[i], cl.m[i])));
    }
    let log_c: f64 = (0..n).map(|i| statrs::function::factorial::ln_binomial(cl.m[i] as u64, cl.y[i] as u64)).sum();
    let eta = &cl.x * beta;
    let terms = (0..n).map(|i| Term::Binary { succ: cl.y[i] as f64, fail: (cl.m[i] - cl.y[i]) as f64 }).collect();
    let rows = ProbitRows::new(eta.clone(), cl.z.clone(), terms)?;
    let gwi = prior_gwi(sigma, Arc::new(rows))?;

    // one row per trial, sign +1 for successes and −1 for failures
    let (zt, v2) = augmented_binomial(cl, &eta);
    let skew = if zt.nrows() == 0 {
        None
    } else {
        let k2 = zt.nrows();
        Some(additive_block(&zt, sigma, Matrix::identity(k2, k2), -1.0, v2, None)?)
    };
    Ok(BuiltLikelihood { log_c, skew, gwi })
}

/// `(J Z, J X β)` with one row per trial.
fn augmented_binomial(cl: &BinomialCluster, eta: &Vector) -> (Matrix, Vector) {
    let total: usize = cl.m.iter().map(|&m| m as usize).sum();
    let k = cl.z.ncols();
    let mut zt = Matrix::zeros(total, k);
    let mut v2 = Vector::zeros(total);
    let mut r = 0;
    for i in 0..cl.y.len() {
        for t in 0..cl.m[i] {
            let j = if t < cl.y[i] { 1.0 } else { -1.0 };
            for c in 0..k {
                zt[(r, c)] = j * cl.z[(i, c)];
            }
            v2[r] = j * eta[i];
            r += 1;
        }
    }
    (zt, v2)
}

/// Contrasts for individual `i`: `η_ij = x_iᵀ(β_y − β_j)` and rows
/// `z_{iy} − z_{ij}` over `j ≠ y`, in category order.
fn multinomial_contrasts(cl: &MultinomialCluster, b: &Matrix, i: usize) -> (Vector, Matrix) {
    let c = cl.c;
    let k = cl.y[i] - 1;
    let xb = cl.x.row(i) * b;
    let zi = &cl.z[i];
    let kdim = zi.ncols();
    let mut eta = Vector::zeros(c - 1);
    let mut km = Matrix::zeros(c - 1, kdim);
    let mut r = 0;
    for j in (0..c).filter(|&j| j != k) {
        eta[r] = xb[k] - xb[j];
        for a in 0..kdim {
            km[(r, a)] = zi[(k, a)] - zi[(j, a)];
        }
        r += 1;
    }
    (eta, km)
}

/// `B` is `p × c` with column `k` the coefficients of category `k + 1`.
pub fn build_multinomial(cl: &MultinomialCluster, b: &Matrix, sigma: &Matrix) -> Result<BuiltLikelihood> {
    let n = cl.y.len();
    check_rows(n, &[("x", cl.x.nrows()), ("z", cl.z.len())])?;
    if cl.c < 2 {
        return Err(Error::InvalidInput(format!("{} categories", cl.c)));
    }
    if b.shape() != (cl.x.ncols(), cl.c) {
        return Err(Error::DimensionMismatch(format!("B is {:?}, expected {}x{}", b.shape(), cl.x.ncols(), cl.c)));
    }
    let k = cl.z[0].ncols();
    check_sigma(sigma, k)?;
    for i in 0..n {
        if cl.y[i] == 0 || cl.y[i] > cl.c {
            return Err(Error::InvalidInput(format!("row {i}: category {} outside 1..={}", cl.y[i], cl.c)));
        }
        if cl.z[i].shape() != (cl.c, k) {
            return Err(Error::DimensionMismatch(format!("row {i}: z is {:?}, expected {}x{k}", cl.z[i].shape(), cl.c)));
        }
    }
    let (etas, kmats): (Vec<_>, Vec<_>) = (0..n).map(|i| multinomial_contrasts(cl, b, i)).unzip();
    let m = cl.c - 1;
    let k2 = n * m;
    let mut kt = Matrix::zeros(k2, k);
    let mut v2 = Vector::zeros(k2);
    let mut omega = Matrix::zeros(k2, k2);
    for i in 0..n {
        kt.rows_mut(i * m, m).copy_from(&kmats[i]);
        v2.rows_mut(i * m, m).copy_from(&etas[i]);
        omega.view_mut((i * m, i * m), (m, m)).copy_from(&(Matrix::identity(m, m) + Matrix::from_element(m, m, 1.0)));
    }
    let skew = additive_block(&kt, sigma, omega, -1.0, v2, None)?;
    let rows = MultinomialRows::new(etas, kmats, MULTINOMIAL_NODES)?;
    let gwi = prior_gwi(sigma, Arc::new(rows))?;
    Ok(BuiltLikelihood { log_c: 0.0, skew: Some(skew), gwi })
}

pub fn build_ordered(cl: &OrderedCluster, beta: &Vector, cut: &Cutpoints, sigma: &Matrix) -> Result<BuiltLikelihood> {
    let n = cl.y.len();
    check_rows(n, &[("x", cl.x.nrows()), ("z", cl.z.nrows())])?;
    if cl.c < 2 || cut.n_categories() != cl.c {
        return Err(Error::DimensionMismatch(format!("{} categories with {} free cut points", cl.c, cut.free().len())));
    }
    if cl.x.ncols() != beta.len() {
        return Err(Error::DimensionMismatch(format!("x has {} columns, β has {}", cl.x.ncols(), beta.len())));
    }
    check_sigma(sigma, cl.z.ncols())?;
    if let Some(i) = (0..n).find(|&i| cl.y[i] == 0 || cl.y[i] > cl.c) {
        return Err(Error::InvalidInput(format!("row {i}: category {} outside 1..={}", cl.y[i], cl.c)));
    }
    let eta = &cl.x * beta;
    let terms = cl.y.iter().map(|&y| Term::Interval { lo: cut.bound(y - 1), hi: cut.bound(y) }).collect();
    let rows = ProbitRows::new(-&eta, -&cl.z, terms)?;
    let gwi = prior_gwi(sigma, Arc::new(rows))?;
    let upper = Vector::from_fn(n, |i, _| cut.bound(cl.y[i]) - eta[i]);
    let lower = Vector::from_fn(n, |i, _| cut.bound(cl.y[i] - 1) - eta[i]);
    let skew = additive_block(&cl.z, sigma, Matrix::identity(n, n), 1.0, upper, Some(lower))?;
    Ok(BuiltLikelihood { log_c: 0.0, skew: Some(skew), gwi })
}

/// Pieces of the GSM likelihood that both representations share.
pub(crate) struct GsmParts {
    pub obs: Vec<usize>,
    pub cens: Vec<usize>,
    /// `H = Z_oᵀZ_o + Σ⁻¹` and its inverse.
    pub h_inv: Matrix,
    /// `h = −H⁻¹Z_oᵀX_oβ`.
    pub h: Vector,
    pub log_k: f64,
}

pub(crate) fn gsm_parts(cl: &GsmCluster, beta: &Vector, sigma: &Matrix) -> Result<GsmParts> {
    let n = cl.time.len();
    check_rows(n, &[("event", cl.event.len()), ("x", cl.x.nrows()), ("dx", cl.dx.nrows()), ("z", cl.z.nrows())])?;
    if cl.x.ncols() != beta.len() || cl.dx.ncols() != beta.len() {
        return Err(Error::DimensionMismatch(format!("x has {} columns, β has {}", cl.x.ncols(), beta.len())));
    }
    let k = cl.z.ncols();
    check_sigma(sigma, k)?;
    let obs: Vec<usize> = (0..n).filter(|&i| cl.event[i]).collect();
    let cens: Vec<usize> = (0..n).filter(|&i| !cl.event[i]).collect();
    let mut log_c = 0.0;
    for &i in &obs {
        let d = cl.dx.row(i).dot(&beta.transpose());
        if !(d > 0.0) {
            return Err(Error::MonotonicityViolation { row: i, value: d });
        }
        log_c += d.ln();
    }
    let zo = cl.z.select_rows(&obs);
    let r = cl.x.select_rows(&obs) * beta;
    let sig_chol = cholesky_strict(sigma)?;
    let mut hm = zo.transpose() * &zo + sig_chol.inverse();
    symmetrize(&mut hm);
    let h_chol = cholesky(&hm)?;
    let h = -h_chol.solve(&(zo.transpose() * &r));
    // log φ_{n_o}(X_oβ; 0, I + Z_oΣZ_oᵀ) through |ΣH| and rᵀr − hᵀHh
    let quad = r.dot(&r) - h.dot(&(&hm * &h));
    let log_det = sig_chol.log_det() + h_chol.log_det();
    let log_k = log_c - obs.len() as f64 * LN_SQRT_2PI - 0.5 * log_det - 0.5 * quad;
    Ok(GsmParts { obs, cens, h_inv: h_chol.inverse(), h, log_k })
}

pub fn build_gsm(cl: &GsmCluster, beta: &Vector, sigma: &Matrix) -> Result<BuiltLikelihood> {
    let parts = gsm_parts(cl, beta, sigma)?;
    let k = cl.z.ncols();
    if parts.cens.is_empty() {
        let gwi = GwiProblem::new(parts.h.clone(), parts.h_inv.clone(), Arc::new(UnitIntegrand(k)))?;
        return Ok(BuiltLikelihood { log_c: parts.log_k, skew: None, gwi });
    }
    let zc = cl.z.select_rows(&parts.cens);
    let xc = cl.x.select_rows(&parts.cens) * beta;
    let nc = parts.cens.len();
    let terms = vec![Term::Binary { succ: 1.0, fail: 0.0 }; nc];
    let rows = ProbitRows::new(-&xc, -&zc, terms)?;
    let gwi = GwiProblem::new(parts.h.clone(), parts.h_inv.clone(), Arc::new(rows))?;
    // V₂ = ε + Z_c(U − h), U ~ N(h, H⁻¹), below −X_cβ − Z_c h
    let xi21 = &zc * &parts.h_inv;
    let mut xi22 = Matrix::identity(nc, nc) + &xi21 * zc.transpose();
    symmetrize(&mut xi22);
    let v2 = -xc - &zc * &parts.h;
    let skew = SkewParams::new(parts.h.clone(), Vector::zeros(nc), parts.h_inv.clone(), xi21, xi22, v2, None)?;
    Ok(BuiltLikelihood { log_c: parts.log_k, skew: Some(skew), gwi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm_cdf;

    fn m1(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn single_binary_closed_form() {
        let cl = BinomialCluster { y: vec![1], m: vec![1], x: m1(1.0), z: m1(1.0) };
        let beta = Vector::from_vec(vec![0.7]);
        let b = build_binomial(&cl, &beta, &m1(0.64)).unwrap();
        let want = norm_cdf(0.7 / 1.64f64.sqrt()).ln();
        let c = b.log_marginal_cdf(&CdfOptions::default()).unwrap();
        assert!((c.log_estimate - want).abs() < 1e-14);
        let g = b.log_marginal_gwi(Engine::Aghq(20), &McOptions::default()).unwrap();
        assert!((g.log_estimate - want).abs() < 1e-10);
    }

    #[test]
    fn binomial_coefficient() {
        let cl = BinomialCluster { y: vec![1], m: vec![2], x: m1(1.0), z: m1(1.0) };
        let b = build_binomial(&cl, &Vector::from_vec(vec![0.0]), &m1(1.0)).unwrap();
        assert!((b.log_c - 2f64.ln()).abs() < 1e-15);
        assert_eq!(b.k2(), 2);
    }

    #[test]
    fn cutpoints_bounds() {
        let c = Cutpoints::new(vec![0.5, 1.5]).unwrap();
        assert_eq!(c.n_categories(), 4);
        assert_eq!(c.bound(0), f64::NEG_INFINITY);
        assert_eq!(c.bound(1), 0.0);
        assert_eq!(c.bound(3), 1.5);
        assert_eq!(c.bound(4), f64::INFINITY);
        assert!(Cutpoints::new(vec![0.5, 0.5]).is_err());
        assert!(Cutpoints::new(vec![-0.1]).is_err());
    }
}
