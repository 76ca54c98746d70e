//! Gradients of the cluster log marginal likelihood in `(β, Σ, γ)`.
//!
//! The CDF path differentiates `log P(ℓ < V₂ ≤ v₂)` through `mvn_interval_grad`
//! and the chain rule, on the same lattice points as the value. The GWI path
//! uses `∇ log L = E[∇ log f(y, u) | y]`, with the posterior expectation
//! taken over the engine's own weighted nodes.

use super::{gsm_parts, multinomial_contrasts, shift_log, Cluster, GsmCluster, ModelParams, MULTINOMIAL_NODES};
use crate::error::{Error, Result};
use crate::estimate::ApproxResult;
use crate::gwi::{self, ghq_rule, multinomial_log_prob, Engine, McOptions, Term};
use crate::mvn_cdf::{log_interval_prob, mvn_interval_grad, CdfOptions, HyperRect};
use crate::numeric::{cholesky_strict, inv_mills, norm_log_pdf, symmetrize, Matrix, Vector};

#[derive(Debug, Clone)]
pub enum GradPath {
    Cdf(CdfOptions),
    Gwi { engine: Engine, opts: McOptions },
}

#[derive(Debug, Clone)]
pub struct LoglikGrad {
    /// The log marginal likelihood from the same evaluations.
    pub value: ApproxResult,
    /// Same layout as `ModelParams::beta`.
    pub d_beta: Vector,
    /// Symmetric: `d log L = Σ_ij d_sigma[i][j]·dΣ[i][j]`.
    pub d_sigma: Matrix,
    /// With respect to the free cut points `γ₂, …`.
    pub d_cutpoints: Vector,
}

pub fn loglik_gradient(cluster: &Cluster, params: &ModelParams, path: &GradPath) -> Result<LoglikGrad> {
    match path {
        GradPath::Cdf(opts) => cdf_gradient(cluster, params, opts),
        GradPath::Gwi { engine, opts } => gwi_gradient(cluster, params, *engine, opts),
    }
}

fn sym(m: &Matrix) -> Matrix {
    let mut s = m + m.transpose();
    s *= 0.5;
    s
}

struct Interval {
    p: ApproxResult,
    d_lower: Vector,
    d_upper: Vector,
    /// `∂P/∂Ξ₂₂`.
    g: Matrix,
}

fn interval_grad(lower: Vector, upper: Vector, cov: &Matrix, opts: &CdfOptions) -> Result<Interval> {
    let k = upper.len();
    let g = mvn_interval_grad(&HyperRect::new(lower, upper)?, &Vector::zeros(k), cov, opts)?;
    Ok(Interval { p: g.prob, d_lower: g.d_lower, d_upper: g.d_upper, g: g.d_sigma })
}

fn cdf_gradient(cluster: &Cluster, params: &ModelParams, opts: &CdfOptions) -> Result<LoglikGrad> {
    let built = cluster.build(params)?;
    let ncut = params.cutpoints.free().len();
    let sigma = &params.sigma;
    let Some(sp) = &built.skew else {
        // no censored GSM rows: the likelihood is the closed form log k
        let Cluster::Gsm(cl) = cluster else { unreachable!("only GSM clusters have k₂ = 0") };
        let (d_beta, d_sigma) = gsm_log_k_grad(cl, &params.beta, sigma)?;
        let value = ApproxResult::exact(built.log_c, 0, Default::default());
        return Ok(LoglikGrad { value, d_beta, d_sigma, d_cutpoints: Vector::zeros(ncut) });
    };
    let lower = sp.lower.clone().unwrap_or_else(|| Vector::from_element(sp.k2(), f64::NEG_INFINITY));
    // ξ₂ = 0 for every family
    let iv = interval_grad(lower, sp.v2.clone(), &sp.xi22, opts)?;
    let pr = iv.p.estimate;
    let value = shift_log(iv.p.clone(), built.log_c);
    let mut d_cut = Vector::zeros(ncut);
    let (d_beta, d_sigma) = match cluster {
        Cluster::Binomial(cl) => {
            let (zt, _) = super::augmented_binomial(cl, &(&cl.x * &params.beta));
            // X̃ rows are ±x_i in the same order as Z̃
            let mut xt = Matrix::zeros(zt.nrows(), cl.x.ncols());
            let mut r = 0;
            for i in 0..cl.y.len() {
                for t in 0..cl.m[i] {
                    let j = if t < cl.y[i] { 1.0 } else { -1.0 };
                    xt.row_mut(r).copy_from(&(cl.x.row(i) * j));
                    r += 1;
                }
            }
            (xt.transpose() * &iv.d_upper / pr, zt.transpose() * &iv.g * &zt / pr)
        }
        Cluster::Ordered(cl) => {
            let d = &iv.d_upper + &iv.d_lower;
            for (i, &y) in cl.y.iter().enumerate() {
                if y >= 2 && y - 2 < ncut {
                    d_cut[y - 2] += iv.d_upper[i];
                }
                if y >= 3 && y - 3 < ncut {
                    d_cut[y - 3] += iv.d_lower[i];
                }
            }
            d_cut /= pr;
            (-(cl.x.transpose() * d) / pr, cl.z.transpose() * &iv.g * &cl.z / pr)
        }
        Cluster::Multinomial(cl) => {
            let p = cl.x.ncols();
            let b = Matrix::from_column_slice(p, cl.c, params.beta.as_slice());
            let m = cl.c - 1;
            let mut db = Matrix::zeros(p, cl.c);
            let mut kt = Matrix::zeros(cl.y.len() * m, sigma.nrows());
            for i in 0..cl.y.len() {
                let (_, km) = multinomial_contrasts(cl, &b, i);
                kt.rows_mut(i * m, m).copy_from(&km);
                let k = cl.y[i] - 1;
                for (r, j) in (0..cl.c).filter(|&j| j != k).enumerate() {
                    let g = iv.d_upper[i * m + r];
                    for a in 0..p {
                        db[(a, k)] += g * cl.x[(i, a)];
                        db[(a, j)] -= g * cl.x[(i, a)];
                    }
                }
            }
            (Vector::from_column_slice((db / pr).as_slice()), kt.transpose() * &iv.g * &kt / pr)
        }
        Cluster::Gsm(cl) => {
            let parts = gsm_parts(cl, &params.beta, sigma)?;
            let (db_k, ds_k) = gsm_log_k_grad(cl, &params.beta, sigma)?;
            let zc = cl.z.select_rows(&parts.cens);
            let xc = cl.x.select_rows(&parts.cens);
            let zo = cl.z.select_rows(&parts.obs);
            let xo = cl.x.select_rows(&parts.obs);
            // v₂ = −X_cβ − Z_c h with h = −H⁻¹Z_oᵀX_oβ
            let dv2 = -&xc + &zc * &parts.h_inv * zo.transpose() * &xo;
            let d_beta = db_k + dv2.transpose() * &iv.d_upper / pr;
            let sig_inv = cholesky_strict(sigma)?.inverse();
            let bm = &parts.h_inv * &sig_inv;
            let a = zc.transpose() * &iv.d_upper;
            let shift_part = -(bm.transpose() * a * parts.h.transpose() * &sig_inv);
            let cov_part = bm.transpose() * zc.transpose() * &iv.g * &zc * &bm;
            (d_beta, ds_k + (sym(&shift_part) + cov_part) / pr)
        }
    };
    let mut d_sigma = d_sigma;
    symmetrize(&mut d_sigma);
    Ok(LoglikGrad { value, d_beta, d_sigma, d_cutpoints: d_cut })
}

/// Gradient of `log k = Σ log(x′_iᵀβ) + log φ(X_oβ; 0, I + Z_oΣZ_oᵀ)`.
fn gsm_log_k_grad(cl: &GsmCluster, beta: &Vector, sigma: &Matrix) -> Result<(Vector, Matrix)> {
    let parts = gsm_parts(cl, beta, sigma)?;
    let k = sigma.nrows();
    let mut db = Vector::zeros(beta.len());
    if parts.obs.is_empty() {
        return Ok((db, Matrix::zeros(k, k)));
    }
    for &i in &parts.obs {
        let d = cl.dx.row(i).transpose();
        db += &d / d.dot(beta);
    }
    let zo = cl.z.select_rows(&parts.obs);
    let xo = cl.x.select_rows(&parts.obs);
    // (I + Z_oΣZ_oᵀ)⁻¹X_oβ = X_oβ + Z_o h
    let vr = &xo * beta + &zo * &parts.h;
    db -= xo.transpose() * &vr;
    let w = zo.transpose() * &vr;
    let a = zo.transpose() * &zo;
    let m = &a - &a * &parts.h_inv * &a;
    let ds = (&w * w.transpose() - m) * 0.5;
    Ok((db, ds))
}

/// `∇_θ log f(y, u)` accumulated with weights `w·exp(lr)`.
struct ScoreAcc {
    shift: f64,
    total: f64,
    beta: Vector,
    cut: Vector,
    /// Σ of weight × Σ⁻¹u(Σ⁻¹u)ᵀ.
    outer: Matrix,
}

impl ScoreAcc {
    fn new(p: usize, ncut: usize, k: usize) -> Self {
        Self { shift: f64::NEG_INFINITY, total: 0.0, beta: Vector::zeros(p), cut: Vector::zeros(ncut), outer: Matrix::zeros(k, k) }
    }

    fn weight(&mut self, lr: f64, w: f64) -> f64 {
        if lr == f64::NEG_INFINITY || w == 0.0 {
            return 0.0;
        }
        if lr > self.shift {
            let s = (self.shift - lr).exp();
            self.total *= s;
            self.beta *= s;
            self.cut *= s;
            self.outer *= s;
            self.shift = lr;
        }
        w * (lr - self.shift).exp()
    }
}

fn gwi_gradient(cluster: &Cluster, params: &ModelParams, engine: Engine, opts: &McOptions) -> Result<LoglikGrad> {
    let built = cluster.build(params)?;
    let p = params.beta.len();
    let ncut = params.cutpoints.free().len();
    let k = params.sigma.nrows();
    let sig_inv = cholesky_strict(&params.sigma)?.inverse();
    let mut acc = ScoreAcc::new(p, ncut, k);
    let score = Scorer::new(cluster, params)?;
    let mut db = Vector::zeros(p);
    let mut dc = Vector::zeros(ncut);
    let mut obs = |u: &[f64], lr: f64, w: f64| {
        let c = acc.weight(lr, w);
        if c == 0.0 {
            return;
        }
        let uv = Vector::from_column_slice(u);
        score.eval(&uv, &mut db, &mut dc);
        acc.total += c;
        acc.beta.axpy(c, &db, 1.0);
        acc.cut.axpy(c, &dc, 1.0);
        let s = &sig_inv * &uv;
        acc.outer.ger(c, &s, &s, 1.0);
    };
    let p_ = &built.gwi;
    let start = std::time::Instant::now();
    let res = match engine {
        Engine::Importance => gwi::importance_sample_observed(p_, opts, &mut obs)?,
        Engine::SphericalRadial => gwi::spherical_radial_observed(p_, opts, &mut obs)?,
        Engine::Rqmc => gwi::rqmc_observed(p_, opts, &mut obs)?,
        Engine::Aghq(b) => {
            let v = gwi::aghq_observed(p_, b, gwi::DEFAULT_NODE_BUDGET, &mut obs)?;
            ApproxResult::exact(v, (b as u64).saturating_pow(k as u32), start.elapsed())
        }
        e => return Err(Error::NotApplicable(format!("no gradient for the {} engine", e.name()))),
    };
    if !(acc.total > 0.0) {
        return Err(Error::InvalidInput("posterior weights sum to zero".into()));
    }
    let d_beta = &acc.beta / acc.total;
    let d_cut = &acc.cut / acc.total;
    let mut d_sigma = (&acc.outer / acc.total - &sig_inv) * 0.5;
    symmetrize(&mut d_sigma);
    Ok(LoglikGrad { value: shift_log(res, built.log_c), d_beta, d_sigma, d_cutpoints: d_cut })
}

/// `∇_β` and `∇_γ` of the log complete-data likelihood given `u`; the `Σ`
/// part comes from the Gaussian density alone.
struct Scorer<'a> {
    cluster: &'a Cluster,
    params: &'a ModelParams,
    eta: Vector,
    rule: Option<gwi::QuadratureRule>,
    b: Option<Matrix>,
}

impl<'a> Scorer<'a> {
    fn new(cluster: &'a Cluster, params: &'a ModelParams) -> Result<Self> {
        let (eta, rule, b) = match cluster {
            Cluster::Binomial(c) => (&c.x * &params.beta, None, None),
            Cluster::Ordered(c) => (&c.x * &params.beta, None, None),
            Cluster::Gsm(c) => (&c.x * &params.beta, None, None),
            Cluster::Multinomial(c) => {
                let b = Matrix::from_column_slice(c.x.ncols(), c.c, params.beta.as_slice());
                (Vector::zeros(0), Some(ghq_rule(MULTINOMIAL_NODES)?), Some(b))
            }
        };
        Ok(Self { cluster, params, eta, rule, b })
    }

    fn eval(&self, u: &Vector, db: &mut Vector, dc: &mut Vector) {
        db.fill(0.0);
        dc.fill(0.0);
        match self.cluster {
            Cluster::Binomial(cl) => {
                let zu = &cl.z * u;
                for i in 0..cl.y.len() {
                    let term = Term::Binary { succ: cl.y[i] as f64, fail: (cl.m[i] - cl.y[i]) as f64 };
                    let (_, d1, _) = term.eval(self.eta[i] + zu[i]);
                    db.axpy(d1, &cl.x.row(i).transpose(), 1.0);
                }
            }
            Cluster::Ordered(cl) => {
                let zu = &cl.z * u;
                let cut = &self.params.cutpoints;
                let ncut = cut.free().len();
                for (i, &y) in cl.y.iter().enumerate() {
                    let t = -self.eta[i] - zu[i];
                    let (lo, hi) = (cut.bound(y - 1) + t, cut.bound(y) + t);
                    let lf = log_interval_prob(lo, hi);
                    let rb = if hi.is_finite() { (norm_log_pdf(hi) - lf).exp() } else { 0.0 };
                    let ra = if lo.is_finite() { (norm_log_pdf(lo) - lf).exp() } else { 0.0 };
                    db.axpy(-(rb - ra), &cl.x.row(i).transpose(), 1.0);
                    if y >= 2 && y - 2 < ncut {
                        dc[y - 2] += rb;
                    }
                    if y >= 3 && y - 3 < ncut {
                        dc[y - 3] -= ra;
                    }
                }
            }
            Cluster::Multinomial(cl) => {
                let b = self.b.as_ref().expect("multinomial");
                let rule = self.rule.as_ref().expect("multinomial");
                let p = cl.x.ncols();
                for i in 0..cl.y.len() {
                    let (eta, km) = multinomial_contrasts(cl, b, i);
                    let s = eta + km * u;
                    let (_, g) = multinomial_log_prob(s.as_slice(), rule);
                    let k = cl.y[i] - 1;
                    for (r, j) in (0..cl.c).filter(|&j| j != k).enumerate() {
                        for a in 0..p {
                            db[k * p + a] += g[r] * cl.x[(i, a)];
                            db[j * p + a] -= g[r] * cl.x[(i, a)];
                        }
                    }
                }
            }
            Cluster::Gsm(cl) => {
                let zu = &cl.z * u;
                for i in 0..cl.time.len() {
                    let t = self.eta[i] + zu[i];
                    if cl.event[i] {
                        let d = cl.dx.row(i).transpose();
                        db.axpy(1.0 / d.dot(&self.params.beta), &d, 1.0);
                        db.axpy(-t, &cl.x.row(i).transpose(), 1.0);
                    } else {
                        db.axpy(-inv_mills(-t), &cl.x.row(i).transpose(), 1.0);
                    }
                }
            }
        }
    }
}
