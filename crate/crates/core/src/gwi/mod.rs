//! Gaussian-weighted integrals `L = ∫ φ(u; ξ₁, Ξ₁₁) h(u) du` and the engines
//! that approximate them. Every engine works on `log L`.
//!
//! Adaptive engines draw `x ~ N(0, I)` and evaluate at `u = û + C x`, where
//! `C Cᵀ = (−Ĥ)⁻¹` comes from the mode of `log g = log φ + log h`; the
//! non-adaptive ones use `u = ξ₁ + S x` with `S Sᵀ = Ξ₁₁`.

mod integrand;
mod quadrature;
mod sampling;

use std::sync::Arc;
use std::time::Instant;

pub use integrand::{multinomial_integrand, multinomial_log_prob, MultinomialRows, ProbitRows, Term};
pub use quadrature::{aghq, aghq_observed, ghq, ghq_rule, tensor_log_sum, QuadratureRule, DEFAULT_NODE_BUDGET};
pub use sampling::{
    importance_sample, importance_sample_observed, random_rotation, rqmc, rqmc_observed, spherical_radial,
    spherical_radial_observed, spherical_radial_rule, SphericalRule,
};

use crate::error::{Error, Result};
use crate::estimate::ApproxResult;
use crate::numeric::{cholesky, cholesky_strict, CholFactor, Matrix, Vector, LN_SQRT_2PI};

/// `log h(u)` for `h(u) ∈ (0, 1]`, with first and second derivatives.
pub trait LogIntegrand: Send + Sync {
    fn dim(&self) -> usize;

    fn log_h(&self, u: &[f64]) -> f64;

    /// Returns `log h(u)` and writes the gradient, and the Hessian when
    /// requested.
    fn log_h_derivs(&self, u: &[f64], grad: &mut [f64], hess: Option<&mut Matrix>) -> f64;

    /// When `h(u)` depends on `u` only through `Z u`, returns `Z` and the
    /// integrand as a function of `v = Z u`.
    fn linear_structure(&self) -> Option<(Matrix, Arc<dyn LogIntegrand>)> {
        None
    }
}

/// `h ≡ 1`.
#[derive(Debug, Clone)]
pub struct UnitIntegrand(pub usize);

impl LogIntegrand for UnitIntegrand {
    fn dim(&self) -> usize {
        self.0
    }

    fn log_h(&self, _u: &[f64]) -> f64 {
        0.0
    }

    fn log_h_derivs(&self, _u: &[f64], grad: &mut [f64], hess: Option<&mut Matrix>) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        if let Some(h) = hess {
            h.fill(0.0);
        }
        0.0
    }
}

#[derive(Clone)]
pub struct GwiProblem {
    pub xi1: Vector,
    pub xi11: Matrix,
    chol: CholFactor,
    xi11_inv: Matrix,
    pub integrand: Arc<dyn LogIntegrand>,
}

impl std::fmt::Debug for GwiProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GwiProblem").field("xi1", &self.xi1).field("xi11", &self.xi11).finish_non_exhaustive()
    }
}

impl GwiProblem {
    pub fn new(xi1: Vector, xi11: Matrix, integrand: Arc<dyn LogIntegrand>) -> Result<Self> {
        let k = xi1.len();
        if k == 0 {
            return Err(Error::BadDimension("zero-dimensional integral".into()));
        }
        if xi11.nrows() != k || xi11.ncols() != k || integrand.dim() != k {
            return Err(Error::DimensionMismatch(format!(
                "mean {k}, covariance {}x{}, integrand {}",
                xi11.nrows(),
                xi11.ncols(),
                integrand.dim()
            )));
        }
        let chol = cholesky(&xi11)?;
        let xi11_inv = chol.inverse();
        Ok(Self { xi1, xi11, chol, xi11_inv, integrand })
    }

    pub fn dim(&self) -> usize {
        self.xi1.len()
    }

    pub fn weight_chol(&self) -> &CholFactor {
        &self.chol
    }

    pub fn log_weight(&self, u: &[f64]) -> f64 {
        let d = Vector::from_column_slice(u) - &self.xi1;
        -0.5 * self.chol.quad_form(&d) - 0.5 * self.chol.log_det() - self.dim() as f64 * LN_SQRT_2PI
    }

    /// `log g(u) = log φ(u; ξ₁, Ξ₁₁) + log h(u)`.
    pub fn log_g(&self, u: &[f64]) -> f64 {
        let h = self.integrand.log_h(u);
        if h == f64::NEG_INFINITY {
            return h;
        }
        self.log_weight(u) + h
    }

    fn log_g_derivs(&self, u: &Vector, grad: &mut Vector, hess: &mut Matrix) -> f64 {
        let lh = self.integrand.log_h_derivs(u.as_slice(), grad.as_mut_slice(), Some(hess));
        let d = u - &self.xi1;
        *grad -= &self.xi11_inv * &d;
        *hess -= &self.xi11_inv;
        lh + self.log_weight(u.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub u_hat: Vector,
    /// `−Ĥ`, the negative Hessian of `log g` at the mode.
    pub neg_hessian: Matrix,
    pub neg_hessian_chol: CholFactor,
    pub log_g_at_mode: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const MODE_GRAD_TOL: f64 = 1e-8;
pub const MODE_MAX_ITER: usize = 200;

/// Damped Newton ascent on `log g` from `ξ₁`. The best iterate is returned
/// with `converged = false` if the gradient tolerance is not met.
pub fn find_mode(p: &GwiProblem) -> Result<ModeResult> {
    let k = p.dim();
    let mut u = p.xi1.clone();
    let mut grad = Vector::zeros(k);
    let mut hess = Matrix::zeros(k, k);
    let mut f = p.log_g_derivs(&u, &mut grad, &mut hess);
    if !f.is_finite() {
        return Err(Error::InvalidInput("integrand is zero at the weight mean".into()));
    }
    let mut iterations = 0;
    let mut converged = false;
    let mut trial_grad = Vector::zeros(k);
    let mut trial_hess = Matrix::zeros(k, k);
    while iterations < MODE_MAX_ITER {
        if grad.amax() <= MODE_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let neg = -&hess;
        let step = match cholesky(&neg) {
            Ok(c) => c.solve(&grad),
            // indefinite: precondition with the weight covariance
            Err(_) => &p.xi11 * &grad,
        };
        let mut t = 1.0;
        let slope = grad.dot(&step);
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &u + &step * t;
            let ft = p.log_g_derivs(&trial, &mut trial_grad, &mut trial_hess);
            // full steps near the optimum may lose a few ulps of log g
            let ok = ft >= f + 1e-4 * t * slope.max(0.0) || (t == 1.0 && ft >= f - 1e-13 * (1.0 + f.abs()));
            if ft.is_finite() && ok {
                u = trial;
                f = ft;
                std::mem::swap(&mut grad, &mut trial_grad);
                std::mem::swap(&mut hess, &mut trial_hess);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = grad.amax() <= 1e-6 * (1.0 + f.abs());
            break;
        }
    }
    let neg_hessian = -hess;
    let neg_hessian_chol = cholesky(&neg_hessian)?;
    Ok(ModeResult { u_hat: u, neg_hessian, neg_hessian_chol, log_g_at_mode: f, iterations, converged })
}

/// Laplace approximation of `log L`.
pub fn laplace(p: &GwiProblem) -> Result<f64> {
    let m = find_mode(p)?;
    Ok(laplace_from_mode(p.dim(), &m))
}

pub fn laplace_from_mode(k: usize, m: &ModeResult) -> f64 {
    k as f64 * LN_SQRT_2PI - 0.5 * m.neg_hessian_chol.log_det() + m.log_g_at_mode
}

/// Affine change of variables `u = center + map·x` with `x ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct Transform {
    pub center: Vector,
    pub map: Matrix,
    log_det: f64,
    adaptive: bool,
}

impl Transform {
    /// Centre and scale at the weight.
    pub fn prior(p: &GwiProblem) -> Self {
        let s = p.weight_chol();
        Self { center: p.xi1.clone(), map: s.lower.clone(), log_det: 0.5 * s.log_det(), adaptive: false }
    }

    /// Centre at the mode with `map·mapᵀ = (−Ĥ)⁻¹`, triangular.
    pub fn adaptive(m: &ModeResult) -> Self {
        let linv = m.neg_hessian_chol.lower_inverse();
        Self { center: m.u_hat.clone(), map: linv.transpose(), log_det: -0.5 * m.neg_hessian_chol.log_det(), adaptive: true }
    }

    /// Centre at the mode with `map = Q Λ^{1/2}` from `(−Ĥ)⁻¹ = Q Λ Qᵀ`,
    /// largest eigenvalue first.
    pub fn adaptive_eigen(m: &ModeResult) -> Result<Self> {
        let cov = m.neg_hessian_chol.inverse();
        let e = crate::numeric::sym_eigen(&cov)?;
        let mut map = e.q.clone();
        for (j, l) in e.lambda.iter().enumerate() {
            let s = l.max(0.0).sqrt();
            map.column_mut(j).scale_mut(s);
        }
        Ok(Self { center: m.u_hat.clone(), map, log_det: -0.5 * m.neg_hessian_chol.log_det(), adaptive: true })
    }

    pub fn prior_eigen(p: &GwiProblem) -> Result<Self> {
        let e = crate::numeric::sym_eigen(&p.xi11)?;
        let mut map = e.q.clone();
        for (j, l) in e.lambda.iter().enumerate() {
            map.column_mut(j).scale_mut(l.max(0.0).sqrt());
        }
        Ok(Self { center: p.xi1.clone(), map, log_det: 0.5 * p.weight_chol().log_det(), adaptive: false })
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    pub fn apply(&self, x: &[f64], u: &mut Vector) {
        u.copy_from(&self.center);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                u.axpy(xj, &self.map.column(j), 1.0);
            }
        }
    }

    /// `log(g(u)·|map| / φ(x))`, whose expectation under `x ~ N(0, I)` is `L`.
    pub fn log_ratio(&self, p: &GwiProblem, x: &[f64], u: &mut Vector) -> f64 {
        self.apply(x, u);
        if !self.adaptive {
            return p.integrand.log_h(u.as_slice());
        }
        let lg = p.log_g(u.as_slice());
        if lg == f64::NEG_INFINITY {
            return lg;
        }
        let x2: f64 = x.iter().map(|v| v * v).sum();
        lg + self.log_det + 0.5 * x2 + x.len() as f64 * LN_SQRT_2PI
    }
}

/// Options shared by the sampling engines.
#[derive(Debug, Clone)]
pub struct McOptions {
    /// Stop once `se_multiplier·SE ≤ rel_tol·|estimate|`.
    pub rel_tol: f64,
    /// Cap on integrand evaluations.
    pub max_samples: u64,
    pub seed: u64,
    pub adaptive: bool,
    pub se_multiplier: f64,
    /// Random rotations per spherical-radial sample.
    pub n_rotations: usize,
    /// Independent scrambles for RQMC.
    pub n_replicates: usize,
    /// RQMC points per replicate in the first stage.
    pub rqmc_start: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-3,
            max_samples: 1_000_000,
            seed: 1,
            adaptive: true,
            se_multiplier: 3.5,
            n_rotations: 1,
            n_replicates: 10,
            rqmc_start: 64,
        }
    }
}

impl McOptions {
    /// Runs to `max_samples` regardless of the error estimate.
    pub fn fixed(max_samples: u64, seed: u64) -> Self {
        Self { rel_tol: 0.0, max_samples, seed, ..Self::default() }
    }

    fn target_rse(&self) -> f64 {
        if self.se_multiplier > 0.0 {
            self.rel_tol / self.se_multiplier
        } else {
            self.rel_tol
        }
    }
}

/// Engine selector for `estimate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Laplace,
    Importance,
    SphericalRadial,
    Rqmc,
    Ghq(usize),
    Aghq(usize),
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Laplace => "laplace",
            Engine::Importance => "importance",
            Engine::SphericalRadial => "spherical_radial",
            Engine::Rqmc => "rqmc",
            Engine::Ghq(_) => "ghq",
            Engine::Aghq(_) => "aghq",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Engine::Importance | Engine::SphericalRadial | Engine::Rqmc)
    }
}

/// Runs one engine and reports `log L` as an `ApproxResult`.
pub fn estimate(p: &GwiProblem, engine: Engine, opts: &McOptions) -> Result<ApproxResult> {
    let start = Instant::now();
    match engine {
        Engine::Laplace => {
            let v = laplace(p)?;
            Ok(ApproxResult::exact(v, 1, start.elapsed()))
        }
        Engine::Importance => importance_sample(p, opts),
        Engine::SphericalRadial => spherical_radial(p, opts),
        Engine::Rqmc => rqmc(p, opts),
        Engine::Ghq(b) => {
            let v = ghq(p, b)?;
            Ok(ApproxResult::exact(v, (b as u64).saturating_pow(p.dim() as u32), start.elapsed()))
        }
        Engine::Aghq(b) => {
            let v = aghq(p, b)?;
            Ok(ApproxResult::exact(v, (b as u64).saturating_pow(p.dim() as u32), start.elapsed()))
        }
    }
}

/// Rewrites `∫ φ(u; ξ₁, Ξ₁₁) h(Z u) du` as a `k`-dimensional integral over
/// `v = Z u ~ N(Z ξ₁, Z Ξ₁₁ Zᵀ)`.
pub fn reduce_gwi_dimension(p: &GwiProblem) -> Result<GwiProblem> {
    let (z, h) = p
        .integrand
        .linear_structure()
        .ok_or_else(|| Error::NotApplicable("integrand has no linear structure".into()))?;
    let k = z.nrows();
    if k >= p.dim() {
        return Err(Error::NotApplicable(format!("reduced dimension {k} is not below {}", p.dim())));
    }
    let mean = &z * &p.xi1;
    let cov = &z * &p.xi11 * z.transpose();
    cholesky_strict(&cov).map_err(|_| Error::NotApplicable("Z Ξ₁₁ Zᵀ is singular".into()))?;
    GwiProblem::new(mean, cov, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm_cdf;

    /// `h(u) = exp(aᵀu)`, unbounded but fine for testing exactness.
    struct LogLinear(Vector);

    impl LogIntegrand for LogLinear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn log_h(&self, u: &[f64]) -> f64 {
            self.0.dot(&Vector::from_column_slice(u))
        }
        fn log_h_derivs(&self, u: &[f64], grad: &mut [f64], hess: Option<&mut Matrix>) -> f64 {
            grad.copy_from_slice(self.0.as_slice());
            if let Some(h) = hess {
                h.fill(0.0);
            }
            self.log_h(u)
        }
    }

    fn spd(k: usize) -> Matrix {
        Matrix::from_fn(k, k, |i, j| if i == j { 1.0 + 0.3 * i as f64 } else { 0.25 })
    }

    #[test]
    fn unit_integrand_mode() {
        let xi1 = Vector::from_vec(vec![0.5, -1.0]);
        let s = spd(2);
        let p = GwiProblem::new(xi1.clone(), s.clone(), Arc::new(UnitIntegrand(2))).unwrap();
        let m = find_mode(&p).unwrap();
        assert!((&m.u_hat - &xi1).amax() < 1e-14);
        let inv = s.clone().try_inverse().unwrap();
        assert!((&m.neg_hessian - inv).amax() < 1e-12);
        assert!(laplace(&p).unwrap().abs() < 1e-13);
    }

    #[test]
    fn laplace_exact_for_log_linear() {
        let a = Vector::from_vec(vec![0.3, -0.7, 0.2]);
        let xi1 = Vector::from_vec(vec![0.1, 0.2, -0.3]);
        let s = spd(3);
        let p = GwiProblem::new(xi1.clone(), s.clone(), Arc::new(LogLinear(a.clone()))).unwrap();
        let want = a.dot(&xi1) + 0.5 * (a.transpose() * &s * &a)[0];
        assert!((laplace(&p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn probit_mode_is_stationary() {
        let rows = ProbitRows::new(Vector::zeros(1), Matrix::identity(1, 1), vec![Term::Binary { succ: 1.0, fail: 0.0 }]).unwrap();
        let p = GwiProblem::new(Vector::zeros(1), Matrix::identity(1, 1), Arc::new(rows)).unwrap();
        let m = find_mode(&p).unwrap();
        let u = m.u_hat[0];
        // u = φ(u)/Φ(u)
        assert!((u - crate::numeric::inv_mills(u)).abs() < 1e-8);
        assert!(m.converged);
        // E Φ(U) = Φ(0) = 1/2; Laplace is close but not exact
        let l = laplace(&p).unwrap();
        assert!((l - 0.5f64.ln()).abs() < 0.05);
        let _ = norm_cdf(0.0);
    }

    #[test]
    fn reduction_shapes() {
        let z = Matrix::from_fn(2, 7, |i, j| ((i + 1) * (j + 2)) as f64 * 0.1 + if i == j { 1.0 } else { 0.0 });
        let rows = ProbitRows::new(Vector::zeros(2), z, vec![Term::Binary { succ: 1.0, fail: 0.0 }; 2]).unwrap();
        let p = GwiProblem::new(Vector::zeros(7), Matrix::identity(7, 7), Arc::new(rows)).unwrap();
        assert_eq!(reduce_gwi_dimension(&p).unwrap().dim(), 2);

        let rows = ProbitRows::new(Vector::zeros(3), Matrix::identity(3, 3), vec![Term::Binary { succ: 1.0, fail: 0.0 }; 3]).unwrap();
        let p = GwiProblem::new(Vector::zeros(3), Matrix::identity(3, 3), Arc::new(rows)).unwrap();
        assert!(matches!(reduce_gwi_dimension(&p), Err(Error::NotApplicable(_))));
    }
}
