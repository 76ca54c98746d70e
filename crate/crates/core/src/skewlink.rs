//! The joint normal block linking a Gaussian-weighted integral to a normal
//! CDF. With `(V₁, V₂)` jointly normal,
//!
//! `P(ℓ < V₂ ≤ v₂) = ∫ φ(v₁; ξ₁, Ξ₁₁) P(ℓ < V₂ ≤ v₂ | V₁ = v₁) dv₁`,
//!
//! the left side being a `k₂`-dimensional CDF and the right a
//! `k₁`-dimensional GWI.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::estimate::ApproxResult;
use crate::gwi::{GwiProblem, LogIntegrand, ProbitRows, Term};
use crate::mvn_cdf::{log_interval_prob, mvn_cdf, mvn_interval_grad, CdfOptions, HyperRect};
use crate::numeric::{cholesky, cholesky_strict, symmetrize, CholFactor, Matrix, Vector};

/// Off-diagonal entries of the conditional covariance below this, relative
/// to the largest entry of `Ξ₂₂`, are rounding noise.
const DIAG_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SkewParams {
    pub xi1: Vector,
    pub xi2: Vector,
    pub xi11: Matrix,
    pub xi21: Matrix,
    pub xi22: Matrix,
    pub v2: Vector,
    /// Lower bounds of `V₂` for interval models; `None` means `−∞`.
    pub lower: Option<Vector>,
    xi11_chol: CholFactor,
    /// `Ξ₂₁Ξ₁₁⁻¹`.
    slope: Matrix,
    /// `Ξ₂₂ − Ξ₂₁Ξ₁₁⁻¹Ξ₁₂`.
    cond_cov: Matrix,
    /// Conditional standard deviations when `cond_cov` is diagonal.
    cond_sd: Option<Vector>,
}

impl SkewParams {
    pub fn new(xi1: Vector, xi2: Vector, xi11: Matrix, xi21: Matrix, xi22: Matrix, v2: Vector, lower: Option<Vector>) -> Result<Self> {
        let (k1, k2) = (xi1.len(), xi2.len());
        if k1 == 0 || k2 == 0 {
            return Err(Error::BadDimension(format!("k1 = {k1}, k2 = {k2}")));
        }
        let bad = xi11.shape() != (k1, k1)
            || xi21.shape() != (k2, k1)
            || xi22.shape() != (k2, k2)
            || v2.len() != k2
            || lower.as_ref().is_some_and(|l| l.len() != k2);
        if bad {
            return Err(Error::DimensionMismatch(format!(
                "k1 = {k1}, k2 = {k2}; Ξ11 {:?}, Ξ21 {:?}, Ξ22 {:?}, v2 {}",
                xi11.shape(),
                xi21.shape(),
                xi22.shape(),
                v2.len()
            )));
        }
        if let Some(l) = &lower {
            if let Some(i) = (0..k2).find(|&i| !(l[i] < v2[i])) {
                return Err(Error::InvalidInput(format!("lower bound {} not below upper {} at {i}", l[i], v2[i])));
            }
        }
        let xi11_chol = cholesky(&xi11)?;
        let slope = xi11_chol.solve_mat(&xi21.transpose()).transpose();
        let mut cond_cov = &xi22 - &slope * xi21.transpose();
        symmetrize(&mut cond_cov);
        cholesky_strict(&cond_cov)?;
        let scale = xi22.amax().max(1.0);
        let diagonal = (0..k2).all(|i| (0..i).all(|j| cond_cov[(i, j)].abs() <= DIAG_TOL * scale));
        let cond_sd = diagonal.then(|| cond_cov.diagonal().map(f64::sqrt));
        Ok(Self { xi1, xi2, xi11, xi21, xi22, v2, lower, xi11_chol, slope, cond_cov, cond_sd })
    }

    pub fn k1(&self) -> usize {
        self.xi1.len()
    }

    pub fn k2(&self) -> usize {
        self.xi2.len()
    }

    /// `Ξ₂₂ − Ξ₂₁Ξ₁₁⁻¹Ξ₁₂`.
    pub fn conditional_cov(&self) -> &Matrix {
        &self.cond_cov
    }

    pub fn has_diagonal_conditional(&self) -> bool {
        self.cond_sd.is_some()
    }

    fn lower_or_inf(&self) -> Vector {
        self.lower.clone().unwrap_or_else(|| Vector::from_element(self.k2(), f64::NEG_INFINITY))
    }

    /// Mean of `V₂` given `V₁ = v₁`.
    pub fn conditional_mean(&self, v1: &Vector) -> Vector {
        &self.xi2 + &self.slope * (v1 - &self.xi1)
    }
}

/// `P(ℓ < V₂ ≤ v₂ | V₁ = v₁)`, closed form when the conditional covariance
/// is diagonal.
pub fn conditional_cdf(sp: &SkewParams, v1: &Vector, opts: &CdfOptions) -> Result<ApproxResult> {
    if v1.len() != sp.k1() {
        return Err(Error::DimensionMismatch(format!("v1 has length {}, expected {}", v1.len(), sp.k1())));
    }
    let start = std::time::Instant::now();
    let m = sp.conditional_mean(v1);
    if let Some(sd) = &sp.cond_sd {
        let mut s = 0.0;
        for i in 0..sp.k2() {
            let lo = sp.lower.as_ref().map_or(f64::NEG_INFINITY, |l| (l[i] - m[i]) / sd[i]);
            s += log_interval_prob(lo, (sp.v2[i] - m[i]) / sd[i]);
        }
        return Ok(ApproxResult::exact(s, 1, start.elapsed()));
    }
    let rect = HyperRect::new(sp.lower_or_inf(), sp.v2.clone())?;
    mvn_cdf(&rect, &m, &sp.cond_cov, opts)
}

/// The marginal `P(ℓ < V₂ ≤ v₂)` as `P(ℓ − v₂ < W ≤ 0)` with
/// `W ~ N(ξ₂ − v₂, Ξ₂₂)`. Rows with `v₂ = +∞` are shifted by `ℓ` instead.
pub fn marginal_as_cdf(sp: &SkewParams) -> (HyperRect, Vector, Matrix) {
    let lower = sp.lower_or_inf();
    let shift = Vector::from_fn(sp.k2(), |i, _| {
        if sp.v2[i].is_finite() {
            sp.v2[i]
        } else if lower[i].is_finite() {
            lower[i]
        } else {
            0.0
        }
    });
    let rect = HyperRect { lower: &lower - &shift, upper: &sp.v2 - &shift };
    (rect, &sp.xi2 - &shift, sp.xi22.clone())
}

/// `mvn_cdf` of `marginal_as_cdf`.
pub fn marginal_cdf(sp: &SkewParams, opts: &CdfOptions) -> Result<ApproxResult> {
    let (rect, mean, cov) = marginal_as_cdf(sp);
    mvn_cdf(&rect, &mean, &cov, opts)
}

/// The marginal as `∫ φ(u; ξ₁, Ξ₁₁) h(u) du` with `h` the conditional CDF.
pub fn marginal_as_gwi(sp: &SkewParams, opts: &CdfOptions) -> Result<GwiProblem> {
    let integrand: Arc<dyn LogIntegrand> = match &sp.cond_sd {
        Some(sd) => Arc::new(diagonal_rows(sp, sd)?),
        None => Arc::new(CdfIntegrand {
            xi1: sp.xi1.clone(),
            xi2: sp.xi2.clone(),
            slope: sp.slope.clone(),
            cov: sp.cond_cov.clone(),
            rect: HyperRect::new(sp.lower_or_inf(), sp.v2.clone())?,
            opts: opts.clone(),
        }),
    };
    GwiProblem::new(sp.xi1.clone(), sp.xi11.clone(), integrand)
}

/// Row `i` standardised: `t_i = −a_iᵀ(u − ξ₁)/s_i` with `a_i` the `i`-th
/// row of `Ξ₂₁Ξ₁₁⁻¹`, between `(ℓ_i − ξ₂ᵢ)/s_i` and `(v₂ᵢ − ξ₂ᵢ)/s_i`.
fn diagonal_rows(sp: &SkewParams, sd: &Vector) -> Result<ProbitRows> {
    let (k1, k2) = (sp.k1(), sp.k2());
    let mut offset = Vector::zeros(k2);
    let mut loading = Matrix::zeros(k2, k1);
    let mut terms = Vec::with_capacity(k2);
    for i in 0..k2 {
        let s = sd[i];
        let row = sp.slope.row(i);
        let centre = row.dot(&sp.xi1.transpose()) / s;
        for j in 0..k1 {
            loading[(i, j)] = -row[j] / s;
        }
        let hi = (sp.v2[i] - sp.xi2[i]) / s;
        match sp.lower.as_ref().map(|l| (l[i] - sp.xi2[i]) / s) {
            Some(lo) if lo > f64::NEG_INFINITY || hi == f64::INFINITY => {
                offset[i] = centre;
                terms.push(Term::Interval { lo, hi });
            }
            _ => {
                offset[i] = centre + hi;
                terms.push(Term::Binary { succ: 1.0, fail: 0.0 });
            }
        }
    }
    ProbitRows::new(offset, loading, terms)
}

/// Conditional CDF with a full covariance, estimated with fixed options so
/// it is a deterministic function of `u`. The Hessian is a central
/// difference of the gradient.
#[derive(Debug, Clone)]
struct CdfIntegrand {
    xi1: Vector,
    xi2: Vector,
    slope: Matrix,
    cov: Matrix,
    rect: HyperRect,
    opts: CdfOptions,
}

impl CdfIntegrand {
    fn mean(&self, u: &[f64]) -> Vector {
        &self.xi2 + &self.slope * (Vector::from_column_slice(u) - &self.xi1)
    }

    fn grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        match mvn_interval_grad(&self.rect, &self.mean(u), &self.cov, &self.opts) {
            Ok(g) => {
                let d = self.slope.transpose() * g.d_mu / g.prob.estimate;
                grad.copy_from_slice(d.as_slice());
                g.prob.log_estimate
            }
            Err(_) => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                f64::NEG_INFINITY
            }
        }
    }
}

impl LogIntegrand for CdfIntegrand {
    fn dim(&self) -> usize {
        self.xi1.len()
    }

    fn log_h(&self, u: &[f64]) -> f64 {
        mvn_cdf(&self.rect, &self.mean(u), &self.cov, &self.opts).map_or(f64::NEG_INFINITY, |r| r.log_estimate)
    }

    fn log_h_derivs(&self, u: &[f64], grad: &mut [f64], hess: Option<&mut Matrix>) -> f64 {
        let v = self.grad(u, grad);
        if let Some(h) = hess {
            let k = self.dim();
            let step = 1e-4;
            let mut x = u.to_vec();
            let (mut gp, mut gm) = (vec![0.0; k], vec![0.0; k]);
            for j in 0..k {
                x[j] = u[j] + step;
                self.grad(&x, &mut gp);
                x[j] = u[j] - step;
                self.grad(&x, &mut gm);
                x[j] = u[j];
                for i in 0..k {
                    h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
                }
            }
            symmetrize(h);
        }
        v
    }
}

/// Density of `V₁` given `ℓ < V₂ ≤ v₂`, with the normalising marginal
/// computed once.
#[derive(Debug, Clone)]
pub struct Posterior {
    sp: SkewParams,
    opts: CdfOptions,
    log_marginal: f64,
}

impl Posterior {
    pub fn new(sp: SkewParams, opts: CdfOptions) -> Result<Self> {
        let log_marginal = marginal_cdf(&sp, &opts)?.log_estimate;
        Ok(Self { sp, opts, log_marginal })
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn log_density(&self, v1: &Vector) -> Result<f64> {
        let lc = conditional_cdf(&self.sp, v1, &self.opts)?.log_estimate;
        let d = v1 - &self.sp.xi1;
        let k = self.sp.k1() as f64;
        let lw = -0.5 * self.sp.xi11_chol.quad_form(&d) - 0.5 * self.sp.xi11_chol.log_det() - k * crate::numeric::LN_SQRT_2PI;
        Ok(lw + lc - self.log_marginal)
    }

    pub fn density(&self, v1: &Vector) -> Result<f64> {
        Ok(self.log_density(v1)?.exp())
    }
}

/// `φ(v₁; ξ₁, Ξ₁₁)·P(V₂ ∈ R | V₁ = v₁) / P(V₂ ∈ R)`.
pub fn posterior_density(sp: &SkewParams, v1: &Vector, opts: &CdfOptions) -> Result<f64> {
    Posterior::new(sp.clone(), opts.clone())?.density(v1)
}
