//! Scalar normal functions, dense symmetric linear algebra and a BFGS minimizer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this argument `norm_log_cdf` switches to the continued fraction.
const LOG_CDF_SWITCH: f64 = -10.0;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn norm_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Mills ratio `Φ(-t)/φ(t)` for `t >= 10` by a backward continued fraction.
fn mills_ratio_tail(t: f64) -> f64 {
    let mut f = t;
    for k in (1..=60).rev() {
        f = t + k as f64 / f;
    }
    1.0 / f
}

/// `log Φ(x)`, accurate in both tails.
pub fn norm_log_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x < LOG_CDF_SWITCH {
        norm_log_pdf(x) + mills_ratio_tail(-x).ln()
    } else if x < 0.0 {
        norm_cdf(x).ln()
    } else {
        (-norm_cdf(-x)).ln_1p()
    }
}

/// Inverse Mills ratio `φ(x)/Φ(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        f64::INFINITY
    } else if x < LOG_CDF_SWITCH {
        1.0 / mills_ratio_tail(-x)
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

// Wichura (1988), algorithm AS241 PPND16.
const AS241_A: [f64; 8] = [
    3.387_132_872_796_366_5, 133.141_667_891_784_38, 1_971.590_950_306_551_3,
    13_731.693_765_509_461, 45_921.953_931_549_87, 67_265.770_927_008_7,
    33_430.575_583_588_13, 2_509.080_928_730_122_7,
];
const AS241_B: [f64; 8] = [
    1.0, 42.313_330_701_600_91, 687.187_007_492_057_9, 5_394.196_021_424_751,
    21_213.794_301_586_597, 39_307.895_800_092_71, 28_729.085_735_721_943,
    5_226.495_278_852_546,
];
const AS241_C: [f64; 8] = [
    1.423_437_110_749_683_5, 4.630_337_846_156_545, 5.769_497_221_460_691,
    3.647_848_324_763_204_5, 1.270_458_252_452_368_4, 0.241_780_725_177_450_6,
    0.022_723_844_989_269_184, 7.745_450_142_783_414e-4,
];
const AS241_D: [f64; 8] = [
    1.0, 2.053_191_626_637_759, 1.676_384_830_183_803_8, 0.689_767_334_985_1,
    0.148_103_976_427_480_08, 0.015_198_666_563_616_457, 5.475_938_084_995_345e-4,
    1.050_750_071_644_416_8e-9,
];
const AS241_E: [f64; 8] = [
    6.657_904_643_501_103, 5.463_784_911_164_114, 1.784_826_539_917_291_3,
    0.296_560_571_828_504_9, 0.026_532_189_526_576_124, 0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5, 2.010_334_399_292_288_1e-7,
];
const AS241_F: [f64; 8] = [
    1.0, 0.599_832_206_555_887_9, 0.136_929_880_922_735_8, 0.014_875_361_290_850_615,
    7.868_691_311_456_133e-4, 1.846_318_317_510_054_8e-5, 1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

fn as241(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&AS241_A, r) / poly(&AS241_B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly(&AS241_C, r) / poly(&AS241_D, r)
    } else {
        r -= 5.0;
        poly(&AS241_E, r) / poly(&AS241_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Standard normal quantile. AS241 followed by one Halley step against
/// `norm_cdf`, always carried out in the lower tail where `1 - p` is exact.
pub fn norm_quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -lower_quantile(1.0 - p);
    }
    lower_quantile(p)
}

fn lower_quantile(p: f64) -> f64 {
    let x = as241(p);
    if !x.is_finite() {
        return x;
    }
    let e = norm_cdf(x) - p;
    let u = e / norm_pdf(x);
    if !u.is_finite() {
        return x;
    }
    x - u / (1.0 + 0.5 * x * u)
}

/// `Φ⁻¹(exp(log_p))`, usable when `p` underflows.
pub fn norm_quantile_log(log_p: f64) -> f64 {
    if log_p > -690.0 {
        return norm_quantile(log_p.exp());
    }
    if log_p == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut x = -(-2.0 * log_p).sqrt();
    for _ in 0..50 {
        let step = (norm_log_cdf(x) - log_p) / inv_mills(x);
        x -= step;
        if step.abs() < 1e-15 * x.abs() {
            break;
        }
    }
    x
}

/// Lower Cholesky factor `S` with `S Sᵀ = Σ + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    pub lower: Matrix,
    /// Diagonal jitter that was needed, zero in the regular case.
    pub jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `S x = b`.
    pub fn solve_lower(&self, b: &Vector) -> Vector {
        let mut x = b.clone();
        forward_subst(&self.lower, &mut x);
        x
    }

    /// Solves `Sᵀ x = b`.
    pub fn solve_upper(&self, b: &Vector) -> Vector {
        let mut x = b.clone();
        backward_subst_t(&self.lower, &mut x);
        x
    }

    /// Solves `Σ x = b`.
    pub fn solve(&self, b: &Vector) -> Vector {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        let mut out = b.clone();
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = self.solve_mat(&Matrix::identity(n, n));
        symmetrize(&mut inv);
        inv
    }

    /// Inverse of the factor itself, `S⁻¹`.
    pub fn lower_inverse(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::identity(n, n);
        for j in 0..n {
            let mut col = out.column(j).into_owned();
            forward_subst(&self.lower, &mut col);
            out.set_column(j, &col);
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        &self.lower * self.lower.transpose()
    }

    /// Quadratic form `bᵀ Σ⁻¹ b`.
    pub fn quad_form(&self, b: &Vector) -> f64 {
        self.solve_lower(b).norm_squared()
    }
}

fn forward_subst(l: &Matrix, x: &mut Vector) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

fn backward_subst_t(l: &Matrix, x: &mut Vector) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn is_symmetric(m: &Matrix, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

fn cholesky_raw(a: &Matrix, jitter: f64) -> Result<Matrix> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let tol = n as f64 * f64::EPSILON * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky factorization without any jitter.
pub fn cholesky_strict(a: &Matrix) -> Result<CholFactor> {
    check_square(a)?;
    Ok(CholFactor { lower: cholesky_raw(a, 0.0)?, jitter: 0.0 })
}

/// Cholesky factorization. A pivot at or below `dim·eps·max diag` triggers
/// one retry with `1e-10·trace/dim` added to the diagonal; a second failure
/// is reported as `NotPositiveDefinite`.
pub fn cholesky(a: &Matrix) -> Result<CholFactor> {
    check_square(a)?;
    match cholesky_raw(a, 0.0) {
        Ok(lower) => Ok(CholFactor { lower, jitter: 0.0 }),
        Err(first) => {
            let n = a.nrows();
            let jitter = 1e-10 * a.trace() / n as f64;
            if !(jitter > 0.0) {
                return Err(first);
            }
            let lower = cholesky_raw(a, jitter)?;
            Ok(CholFactor { lower, jitter })
        }
    }
}

fn check_square(a: &Matrix) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::BadDimension(format!("{}x{} matrix", a.nrows(), a.ncols())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EigenDecomp {
    /// Eigenvectors as columns, sign fixed so the largest entry is positive.
    pub q: Matrix,
    /// Eigenvalues in descending order.
    pub lambda: Vector,
}

/// Sweep cap for the symmetric QR iteration.
pub const EIGEN_MAX_ITER: usize = 10_000;

pub fn sym_eigen(a: &Matrix) -> Result<EigenDecomp> {
    check_square(a)?;
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(Error::NoConvergence(EIGEN_MAX_ITER))?;
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut q = Matrix::zeros(n, n);
    let mut lambda = Vector::zeros(n);
    for (c, &i) in idx.iter().enumerate() {
        lambda[c] = eig.eigenvalues[i];
        let mut col = eig.eigenvectors.column(i).into_owned();
        let mut pivot = 0;
        for r in 1..n {
            if col[r].abs() > col[pivot].abs() * (1.0 + 1e-12) {
                pivot = r;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        q.set_column(c, &col);
    }
    Ok(EigenDecomp { q, lambda })
}

impl EigenDecomp {
    pub fn reconstruct(&self) -> Matrix {
        &self.q * Matrix::from_diagonal(&self.lambda) * self.q.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Stop when `‖∇f‖ ≤ grad_tol·max(1, |f|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Stop early when the relative decrease over one iteration is below this.
    /// Zero disables the check.
    pub f_rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 1000, f_rel_tol: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub n_evals: usize,
    pub status: MinStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counted<F> {
    f: F,
    n: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.n += 1;
        let (v, g) = (self.f)(x);
        if v.is_finite() && g.iter().all(|g| g.is_finite()) {
            (v, g)
        } else {
            (f64::INFINITY, g)
        }
    }
}

/// BFGS with a strong Wolfe line search. `f` returns the value and gradient.
/// A line-search failure or the iteration cap returns the best iterate with
/// the corresponding status rather than an error.
pub fn quasi_newton_minimize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut fun = Counted { f, n: 0 };
    let mut x = x0.to_vec();
    let (mut fx, mut g) = fun.eval(&x);
    if !fx.is_finite() || g.len() != n {
        return Err(Error::InvalidInput("objective not finite at the start point".into()));
    }
    let mut hinv = Matrix::identity(n, n);
    let mut fresh = true;
    let mut iter = 0;
    let converged = |fx: f64, g: &[f64]| norm(g) <= opts.grad_tol * fx.abs().max(1.0);
    let finish = |x, f, grad, iterations, n_evals, status| Minimum { x, f, grad, iterations, n_evals, status };

    while iter < opts.max_iter {
        if converged(fx, &g) {
            return Ok(finish(x, fx, g, iter, fun.n, MinStatus::Converged));
        }
        let gv = Vector::from_column_slice(&g);
        let mut p: Vec<f64> = (-(&hinv * &gv)).iter().copied().collect();
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            hinv = Matrix::identity(n, n);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&p, &g);
        }
        let alpha0 = if fresh { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
        match wolfe_search(&mut fun, &x, fx, &p, slope, alpha0) {
            Some((alpha, fnew, gnew)) => {
                iter += 1;
                let s: Vec<f64> = p.iter().map(|pi| alpha * pi).collect();
                let xnew: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
                let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                let rel_drop = (fx - fnew) / fx.abs().max(1.0);
                x = xnew;
                fx = fnew;
                g = gnew;
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    let sv = Vector::from_column_slice(&s);
                    let yv = Vector::from_column_slice(&y);
                    if fresh {
                        hinv *= sy / dot(&y, &y);
                        fresh = false;
                    }
                    let rho = 1.0 / sy;
                    let hy = &hinv * &yv;
                    let yhy = yv.dot(&hy);
                    hinv += (&sv * sv.transpose()) * (rho * (1.0 + rho * yhy))
                        - (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
                    symmetrize(&mut hinv);
                }
                if opts.f_rel_tol > 0.0 && rel_drop >= 0.0 && rel_drop < opts.f_rel_tol {
                    let status = if converged(fx, &g) { MinStatus::Converged } else { MinStatus::LineSearchFailure };
                    return Ok(finish(x, fx, g, iter, fun.n, status));
                }
            }
            None => {
                if fresh {
                    return Ok(finish(x, fx, g, iter, fun.n, MinStatus::LineSearchFailure));
                }
                hinv = Matrix::identity(n, n);
                fresh = true;
            }
        }
    }
    let status = if converged(fx, &g) { MinStatus::Converged } else { MinStatus::MaxIterations };
    Ok(finish(x, fx, g, iter, fun.n, status))
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;

fn step(x: &[f64], p: &[f64], a: f64) -> Vec<f64> {
    x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect()
}

fn wolfe_search<F>(
    fun: &mut Counted<F>,
    x: &[f64],
    f0: f64,
    p: &[f64],
    slope0: f64,
    alpha0: f64,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = slope0;
    let mut a = alpha0;
    for i in 0..40 {
        let (fa, ga) = fun.eval(&step(x, p, a));
        if !fa.is_finite() {
            a = a_prev + 0.2 * (a - a_prev);
            continue;
        }
        let da = dot(&ga, p);
        if fa > f0 + WOLFE_C1 * a * slope0 || (i > 0 && fa >= f_prev) {
            return zoom(fun, x, f0, p, slope0, (a_prev, f_prev, d_prev), (a, fa, da));
        }
        if da.abs() <= -WOLFE_C2 * slope0 {
            return Some((a, fa, ga));
        }
        if da >= 0.0 {
            return zoom(fun, x, f0, p, slope0, (a, fa, da), (a_prev, f_prev, d_prev));
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
    }
    None
}

fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    let d1c = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1c * d1c - d0 * d1;
    if disc < 0.0 {
        return None;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let t = x1 - (x1 - x0) * (d1 + d2 - d1c) / (d1 - d0 + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn zoom<F>(
    fun: &mut Counted<F>,
    x: &[f64],
    f0: f64,
    p: &[f64],
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..30 {
        let (a_lo, a_hi) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let width = a_hi - a_lo;
        let mut a = cubic_min(lo, hi).unwrap_or(0.5 * (lo.0 + hi.0));
        if !(a > a_lo + 0.1 * width && a < a_hi - 0.1 * width) {
            a = 0.5 * (lo.0 + hi.0);
        }
        let (fa, ga) = fun.eval(&step(x, p, a));
        let da = dot(&ga, p);
        if fa.is_finite() && fa < f0 && best.as_ref().is_none_or(|b| fa < b.1) {
            best = Some((a, fa, ga.clone()));
        }
        if !fa.is_finite() || fa > f0 + WOLFE_C1 * a * slope0 || fa >= lo.1 {
            hi = (a, fa, da);
        } else {
            if da.abs() <= -WOLFE_C2 * slope0 {
                return Some((a, fa, ga));
            }
            if da * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, da);
        }
        if (hi.0 - lo.0).abs() < 1e-14 * lo.0.abs().max(1e-10) {
            break;
        }
    }
    // Sufficient decrease without the curvature condition is still progress.
    best.filter(|b| b.1 <= f0 + WOLFE_C1 * b.0 * slope0)
}

/// Central finite-difference gradient with relative step `h`.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let hi = h * x[i].abs().max(1.0);
            xp[i] = x[i] + hi;
            let fp = f(&xp);
            xp[i] = x[i] - hi;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * hi)
        })
        .collect()
}

/// Numerically stable `log(Σ exp(x_i))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Chi-square(k) lower tail probability.
pub fn chi2_cdf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    statrs::function::gamma::gamma_lr(0.5 * k, 0.5 * x)
}

/// Chi-square(k) upper tail probability.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(0.5 * k, 0.5 * x)
}

fn chi2_log_pdf(x: f64, k: f64) -> f64 {
    let h = 0.5 * k;
    (h - 1.0) * x.ln() - 0.5 * x - h * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(h)
}

/// Solves `P(X ≤ x) = p` for `X ~ χ²(k)` when `lower`, else `P(X > x) = p`.
/// Newton on `log x` with a bisection safeguard.
pub fn chi2_quantile_tail(p: f64, k: f64, lower: bool) -> f64 {
    if p <= 0.0 {
        return if lower { 0.0 } else { f64::INFINITY };
    }
    if p >= 1.0 {
        return if lower { f64::INFINITY } else { 0.0 };
    }
    // Wilson-Hilferty start
    let z = if lower { norm_quantile(p) } else { -norm_quantile(p) };
    let c = 2.0 / (9.0 * k);
    let wh = k * (1.0 - c + z * c.sqrt()).powi(3);
    let mut t = if wh > 1e-300 { wh.ln() } else { (p.ln() * 2.0 / k).max(-700.0) };
    let (mut lo, mut hi) = (-745.0_f64, 710.0_f64);
    let lp = p.ln();
    for _ in 0..200 {
        let x = t.exp();
        let tail = if lower { chi2_cdf(x, k) } else { chi2_sf(x, k) };
        let g = tail.ln() - lp;
        let increasing = lower;
        if (g > 0.0) == increasing {
            hi = hi.min(t);
        } else {
            lo = lo.max(t);
        }
        if g.abs() < 1e-15 {
            return x;
        }
        let dg = (chi2_log_pdf(x, k) + t - tail.ln()).exp() * if lower { 1.0 } else { -1.0 };
        let mut next = t - g / dg;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() < 1e-15 * t.abs().max(1.0) {
            return next.exp();
        }
        t = next;
    }
    t.exp()
}

/// Squared radius `x'` with `P(χ²_k ≤ x') = P(χ²_k > x)`.
pub fn chi2_complement(x: f64, k: f64) -> f64 {
    let upper = chi2_sf(x, k);
    if upper <= 0.5 {
        chi2_quantile_tail(upper, k, true)
    } else {
        chi2_quantile_tail(chi2_cdf(x, k), k, false)
    }
}
