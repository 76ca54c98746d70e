//! Multivariate normal rectangle probabilities by separation of variables
//! over randomized Korobov lattices, with greedy reordering and pathwise
//! gradients.
//!
//! The integrand at `w ∈ [0,1)^{k−1}` is
//!
//!   f(w) = Π_i (Φ(b̃_i) − Φ(ã_i)),  ã_i = (a_i − Σ_{j<i} L_ij y_j)/L_ii,
//!   y_i = Φ⁻¹(Φ(ã_i) + w_i (Φ(b̃_i) − Φ(ã_i))),
//!
//! and gradients come from a reverse sweep through this recursion followed by
//! the Cholesky adjoint `Σ̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` (Φ = lower triangle with
//! halved diagonal). Estimates from the final lattice stage only are used, so
//! the returned gradient is the exact derivative of the returned estimate.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimate::{combine_log_replicates, ApproxResult, Status};
use crate::numeric::{
    inv_mills, norm_cdf, norm_log_cdf, norm_log_pdf, norm_quantile, norm_quantile_log, sym_eigen, CholFactor, Matrix,
    Vector,
};
use crate::sequences::{korobov_lattice, prng};

pub const MAX_DIM: usize = 1000;
/// Eigenvalues below this fraction of the largest mark a degenerate matrix.
pub const DEGENERATE_EIGEN_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperRect {
    pub lower: Vector,
    pub upper: Vector,
}

impl HyperRect {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!("lower {} vs upper {}", lower.len(), upper.len())));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i]) || lower[i].is_nan()) {
            return Err(Error::InvalidInput(format!("lower[{i}] = {} is not below upper[{i}] = {}", lower[i], upper[i])));
        }
        Ok(Self { lower, upper })
    }

    /// `(−∞, upper]`.
    pub fn orthant(upper: Vector) -> Self {
        let lower = Vector::from_element(upper.len(), f64::NEG_INFINITY);
        Self { lower, upper }
    }

    pub fn whole(dim: usize) -> Self {
        Self::orthant(Vector::from_element(dim, f64::INFINITY))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

#[derive(Debug, Clone)]
pub struct CdfOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Cap on integrand evaluations summed over stages and replicates.
    pub max_samples: u64,
    pub n_replicates: usize,
    pub seed: u64,
    pub reorder: bool,
    /// Stop once `se_multiplier·SE ≤ max(abs_tol, rel_tol·|estimate|)`.
    pub se_multiplier: f64,
}

impl Default for CdfOptions {
    fn default() -> Self {
        Self { abs_tol: 0.0, rel_tol: 1e-3, max_samples: 1_000_000, n_replicates: 8, seed: 1, reorder: true, se_multiplier: 3.5 }
    }
}

impl CdfOptions {
    fn validate(&self) -> Result<()> {
        if self.n_replicates < 2 {
            return Err(Error::InvalidInput("n_replicates must be at least 2".into()));
        }
        if self.abs_tol < 0.0 || self.rel_tol < 0.0 {
            return Err(Error::InvalidInput("negative tolerance".into()));
        }
        Ok(())
    }

    /// Options that always run to `max_samples`, for common-random-number use.
    pub fn fixed(max_samples: u64, seed: u64) -> Self {
        Self { abs_tol: 0.0, rel_tol: 0.0, max_samples, seed, ..Self::default() }
    }
}

/// Rectangle bounds centred at the mean, permuted, with the matching
/// Cholesky factor. `det[i]` marks a variable with no conditional variance.
#[derive(Debug, Clone)]
struct Sov {
    k: usize,
    perm: Vec<usize>,
    l: Matrix,
    a: Vec<f64>,
    b: Vec<f64>,
    det: Vec<bool>,
}

/// Per-dimension quantities of one integrand evaluation kept for the
/// reverse sweep.
#[derive(Debug, Clone, Default)]
struct Trace {
    lo: Vec<f64>,
    hi: Vec<f64>,
    y: Vec<f64>,
    r_lo: Vec<f64>,
    r_hi: Vec<f64>,
    q_lo: Vec<f64>,
    q_hi: Vec<f64>,
}

impl Trace {
    fn new(k: usize) -> Self {
        Self {
            lo: vec![0.0; k],
            hi: vec![0.0; k],
            y: vec![0.0; k],
            r_lo: vec![0.0; k],
            r_hi: vec![0.0; k],
            q_lo: vec![0.0; k],
            q_hi: vec![0.0; k],
        }
    }
}

/// `log(Φ(hi) − Φ(lo))` computed on the side of zero where it is accurate.
pub fn log_interval_prob(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return f64::NEG_INFINITY;
    }
    if lo > 0.0 {
        return log_interval_prob(-hi, -lo);
    }
    if hi < -5.0 {
        let lu = norm_log_cdf(hi);
        let ll = norm_log_cdf(lo);
        return lu + (-(ll - lu).exp()).ln_1p();
    }
    (norm_cdf(hi) - norm_cdf(lo)).ln()
}

/// One step of the recursion: log interval probability and the quantile of
/// the fraction `w` inside the interval.
fn truncated_step(lo: f64, hi: f64, w: f64, need_y: bool) -> (f64, f64) {
    if lo > 0.0 {
        let (lw, y) = truncated_step(-hi, -lo, 1.0 - w, need_y);
        return (lw, -y);
    }
    if hi < -5.0 {
        let lu = norm_log_cdf(hi);
        let ll = norm_log_cdf(lo);
        let ratio = (ll - lu).exp();
        let lw = lu + (-ratio).ln_1p();
        let y = if need_y { norm_quantile_log(lu + (ratio + w * (1.0 - ratio)).ln()) } else { 0.0 };
        return (lw, y.clamp(lo, hi));
    }
    let pl = norm_cdf(lo);
    let pu = norm_cdf(hi);
    let width = pu - pl;
    let y = if need_y { norm_quantile(pl + w * width) } else { 0.0 };
    (width.ln(), if y.is_finite() { y } else { y.clamp(lo.max(-38.0), hi.min(38.0)) })
}

impl Sov {
    fn new(rect: &HyperRect, mu: &Vector, sigma: &Matrix, reorder: bool) -> Result<Self> {
        let k = rect.dim();
        if k == 0 || k > MAX_DIM {
            return Err(Error::BadDimension(format!("dimension {k} outside 1..={MAX_DIM}")));
        }
        if mu.len() != k || sigma.nrows() != k || sigma.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "rect {k}, mean {}, covariance {}x{}",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let eig = sym_eigen(sigma)?;
        let lmax = eig.lambda[0];
        let lmin = eig.lambda[k - 1];
        if !(lmax > 0.0) || lmin < -1e-8 * lmax {
            return Err(Error::NotPositiveDefinite { index: k - 1, pivot: lmin });
        }
        let tol = DEGENERATE_EIGEN_RATIO * lmax;

        let mut c = sigma.clone();
        let mut a: Vec<f64> = (0..k).map(|i| rect.lower[i] - mu[i]).collect();
        let mut b: Vec<f64> = (0..k).map(|i| rect.upper[i] - mu[i]).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut l = Matrix::zeros(k, k);
        let mut y = vec![0.0; k];
        let mut det = vec![false; k];

        for i in 0..k {
            if reorder && i + 1 < k {
                let mut best = i;
                let mut best_p = f64::INFINITY;
                for j in i..k {
                    let s: f64 = (0..i).map(|m| l[(j, m)] * y[m]).sum();
                    let var = c[(j, j)] - (0..i).map(|m| l[(j, m)].powi(2)).sum::<f64>();
                    let p = if var > tol {
                        let sd = var.sqrt();
                        log_interval_prob((a[j] - s) / sd, (b[j] - s) / sd)
                    } else if a[j] <= s && s <= b[j] {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    };
                    if p < best_p {
                        best_p = p;
                        best = j;
                    }
                }
                if best != i {
                    c.swap_rows(i, best);
                    c.swap_columns(i, best);
                    a.swap(i, best);
                    b.swap(i, best);
                    perm.swap(i, best);
                    for m in 0..i {
                        let t = l[(i, m)];
                        l[(i, m)] = l[(best, m)];
                        l[(best, m)] = t;
                    }
                }
            }
            let var = c[(i, i)] - (0..i).map(|m| l[(i, m)].powi(2)).sum::<f64>();
            if var > tol {
                let d = var.sqrt();
                l[(i, i)] = d;
                for r in i + 1..k {
                    let s: f64 = (0..i).map(|m| l[(r, m)] * l[(i, m)]).sum();
                    l[(r, i)] = (c[(r, i)] - s) / d;
                }
                if reorder {
                    let s: f64 = (0..i).map(|m| l[(i, m)] * y[m]).sum();
                    let (lo, hi) = ((a[i] - s) / d, (b[i] - s) / d);
                    y[i] = truncated_mean(lo, hi);
                }
            } else {
                det[i] = true;
            }
        }
        Ok(Self { k, perm, l, a, b, det })
    }

    fn from_chol(rect: &HyperRect, mu: &Vector, chol: &CholFactor) -> Self {
        let k = rect.dim();
        Self {
            k,
            perm: (0..k).collect(),
            l: chol.lower.clone(),
            a: (0..k).map(|i| rect.lower[i] - mu[i]).collect(),
            b: (0..k).map(|i| rect.upper[i] - mu[i]).collect(),
            det: vec![false; k],
        }
    }

    fn has_degenerate(&self) -> bool {
        self.det.iter().any(|&d| d)
    }

    /// `log f(w)`; fills `tr` when the gradient is wanted.
    fn eval(&self, w: &[f64], tr: &mut Trace, grad: bool) -> f64 {
        let k = self.k;
        let mut logf = 0.0;
        for i in 0..k {
            let mut s = 0.0;
            for m in 0..i {
                s += self.l[(i, m)] * tr.y[m];
            }
            if self.det[i] {
                if s < self.a[i] || s > self.b[i] {
                    return f64::NEG_INFINITY;
                }
                tr.y[i] = 0.0;
                continue;
            }
            let d = self.l[(i, i)];
            let lo = (self.a[i] - s) / d;
            let hi = (self.b[i] - s) / d;
            let wi = if i + 1 < k { w[i] } else { 0.5 };
            let (lw, y) = truncated_step(lo, hi, wi, i + 1 < k);
            if lw == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            logf += lw;
            tr.y[i] = y;
            if grad {
                tr.lo[i] = lo;
                tr.hi[i] = hi;
                tr.r_lo[i] = if lo.is_finite() { (norm_log_pdf(lo) - lw).exp() } else { 0.0 };
                tr.r_hi[i] = if hi.is_finite() { (norm_log_pdf(hi) - lw).exp() } else { 0.0 };
                if i + 1 < k {
                    let ly = norm_log_pdf(y);
                    tr.q_lo[i] = if lo.is_finite() { (1.0 - wi) * (norm_log_pdf(lo) - ly).exp() } else { 0.0 };
                    tr.q_hi[i] = if hi.is_finite() { wi * (norm_log_pdf(hi) - ly).exp() } else { 0.0 };
                }
            }
        }
        logf
    }

    /// Adds `scale·∇ log f` with respect to (a, b, L) into the accumulators.
    fn reverse(&self, tr: &Trace, scale: f64, ybar: &mut [f64], ga: &mut [f64], gb: &mut [f64], gl: &mut Matrix) {
        let k = self.k;
        ybar.iter_mut().for_each(|v| *v = 0.0);
        for i in (0..k).rev() {
            if self.det[i] {
                continue;
            }
            let d = self.l[(i, i)];
            let yb = if i + 1 < k { ybar[i] } else { 0.0 };
            let hbar = tr.r_hi[i] + yb * tr.q_hi[i];
            let lbar = -tr.r_lo[i] + yb * tr.q_lo[i];
            gb[i] += scale * hbar / d;
            ga[i] += scale * lbar / d;
            let sbar = -(hbar + lbar) / d;
            let mut ldiag = 0.0;
            if hbar != 0.0 {
                ldiag -= hbar * tr.hi[i];
            }
            if lbar != 0.0 {
                ldiag -= lbar * tr.lo[i];
            }
            gl[(i, i)] += scale * ldiag / d;
            for m in 0..i {
                gl[(i, m)] += scale * sbar * tr.y[m];
                ybar[m] += sbar * self.l[(i, m)];
            }
        }
    }
}

/// Mean of a standard normal truncated to `(lo, hi)`.
fn truncated_mean(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        return -truncated_mean(-hi, -lo);
    }
    let lw = log_interval_prob(lo, hi);
    if lw == f64::NEG_INFINITY {
        return if hi < 0.0 { hi } else { lo };
    }
    let pl = if lo.is_finite() { (norm_log_pdf(lo) - lw).exp() } else { 0.0 };
    let pu = if hi.is_finite() { (norm_log_pdf(hi) - lw).exp() } else { 0.0 };
    let m = pl - pu;
    if m.is_finite() {
        m.clamp(lo, hi)
    } else {
        hi.min(-inv_mills(hi))
    }
}

/// Greedy variance-reducing order: at each step the remaining variable with
/// the smallest conditional interval probability, conditioning on truncated
/// means of the variables already placed. Ties keep the original order.
pub fn reorder_variables(rect: &HyperRect, mu: &Vector, sigma: &Matrix) -> Result<Vec<usize>> {
    Ok(Sov::new(rect, mu, sigma, true)?.perm)
}

/// The separation-of-variables integrand at `w`, without reordering.
pub fn sov_integrand(rect: &HyperRect, mu: &Vector, chol: &CholFactor, w: &[f64]) -> f64 {
    let sov = Sov::from_chol(rect, mu, chol);
    let mut tr = Trace::new(sov.k);
    sov.eval(w, &mut tr, false).exp()
}

#[derive(Debug, Clone)]
pub struct IntervalGrad {
    pub prob: ApproxResult,
    pub d_lower: Vector,
    pub d_upper: Vector,
    pub d_mu: Vector,
    /// Symmetric: `dP = Σ_ij d_sigma[i][j]·dΣ[i][j]`.
    pub d_sigma: Matrix,
}

#[derive(Debug, Clone)]
pub struct CdfGrad {
    pub prob: ApproxResult,
    pub d_mu: Vector,
    pub d_sigma: Matrix,
}

struct Accum {
    log_rep: Vec<f64>,
    // gradient sums on the exp(x − shift) scale, per replicate
    shifts: Vec<f64>,
    ga: Vec<Vec<f64>>,
    gb: Vec<Vec<f64>>,
    gl: Vec<Matrix>,
}

fn run_replicate(
    sov: &Sov,
    pts: &[Vec<f64>],
    grad: bool,
    tr: &mut Trace,
    ybar: &mut [f64],
) -> (f64, f64, Vec<f64>, Vec<f64>, Matrix) {
    let k = sov.k;
    let mut shift = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut ga = vec![0.0; if grad { k } else { 0 }];
    let mut gb = vec![0.0; if grad { k } else { 0 }];
    let mut gl = Matrix::zeros(if grad { k } else { 0 }, if grad { k } else { 0 });
    for w in pts {
        let lf = sov.eval(w, tr, grad);
        if lf == f64::NEG_INFINITY {
            continue;
        }
        if lf > shift {
            if shift.is_finite() {
                let f = (shift - lf).exp();
                sum *= f;
                if grad {
                    ga.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= f);
                    gl *= f;
                }
            }
            shift = lf;
        }
        let v = (lf - shift).exp();
        sum += v;
        if grad {
            sov.reverse(tr, v, ybar, &mut ga, &mut gb, &mut gl);
        }
    }
    let n = pts.len() as f64;
    let log_mean = if sum > 0.0 { shift + (sum / n).ln() } else { f64::NEG_INFINITY };
    if grad {
        let inv = 1.0 / n;
        ga.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= inv);
        gl *= inv;
    }
    (log_mean, shift, ga, gb, gl)
}

fn baker(x: f64) -> f64 {
    1.0 - (2.0 * x - 1.0).abs()
}

/// `P(X > h, Y > k)` for a standard bivariate normal with correlation `r`,
/// by Genz's refinement of the Drezner-Wesolowsky method. Absolute error
/// is near 1e-15.
pub fn bivariate_upper(h: f64, k: f64, r: f64) -> f64 {
    const W6: [f64; 3] = [0.1713244923791705, 0.3607615730481384, 0.4679139345726904];
    const X6: [f64; 3] = [0.9324695142031522, 0.6612093864662647, 0.2386191860831970];
    const W12: [f64; 6] = [
        0.04717533638651177, 0.1069393259953183, 0.1600783285433464, 0.2031674267230659, 0.2334925365383547, 0.2491470458134029,
    ];
    const X12: [f64; 6] = [
        0.9815606342467191, 0.9041172563704750, 0.7699026741943050, 0.5873179542866171, 0.3678314989981802, 0.1252334085114692,
    ];
    const W20: [f64; 10] = [
        0.01761400713915212, 0.04060142980038694, 0.06267204833410906, 0.08327674157670475, 0.1019301198172404,
        0.1181945319615184, 0.1316886384491766, 0.1420961093183821, 0.1491729864726037, 0.1527533871307259,
    ];
    const X20: [f64; 10] = [
        0.9931285991850949, 0.9639719272779138, 0.9122344282513259, 0.8391169718222188, 0.7463319064601508,
        0.6360536807265150, 0.5108670019508271, 0.3737060887154196, 0.2277858511416451, 0.07652652113349733,
    ];
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    if r == 0.0 {
        return norm_cdf(-h) * norm_cdf(-k);
    }
    let tp = 2.0 * std::f64::consts::PI;
    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&W6, &X6)
    } else if r.abs() < 0.75 {
        (&W12, &X12)
    } else {
        (&W20, &X20)
    };
    // nodes 1 ± x on [0, 2]
    let nodes = || w.iter().zip(x).flat_map(|(&wi, &xi)| [(wi, 1.0 - xi), (wi, 1.0 + xi)]);
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin() / 2.0;
        for (wi, xi) in nodes() {
            let sn = (asr * xi).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return (bvn * asr / tp + norm_cdf(-h) * norm_cdf(-k)).clamp(0.0, 1.0);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let a_s = 1.0 - r * r;
        let mut a = a_s.sqrt();
        let bs = (h - k).powi(2);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 80.0;
        let asr = -(bs / a_s + hk) / 2.0;
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (bs - a_s) * (1.0 - d * bs) / 3.0 + c * d * a_s * a_s);
        }
        if hk > -100.0 {
            let b = bs.sqrt();
            let sp = tp.sqrt() * norm_cdf(-b / a);
            bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
        }
        a /= 2.0;
        let mut sum = 0.0;
        for (wi, xi) in nodes() {
            let xs = (a * xi).powi(2);
            let asr = -(bs / xs + hk) / 2.0;
            if asr > -100.0 {
                let sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                let rs = (1.0 - xs).sqrt();
                let ep = (-(hk / 2.0) * xs / (1.0 + rs).powi(2)).exp() / rs;
                sum += wi * asr.exp() * (sp - ep);
            }
        }
        bvn = (a * sum - bvn) / tp;
    }
    if r > 0.0 {
        bvn += norm_cdf(-h.max(k));
    } else if h >= k {
        bvn = -bvn;
    } else {
        let l = if h < 0.0 { norm_cdf(k) - norm_cdf(h) } else { norm_cdf(-h) - norm_cdf(-k) };
        bvn = l - bvn;
    }
    bvn.clamp(0.0, 1.0)
}

/// The k = 2 probability in closed form when each variable has at most one
/// finite bound and the value is not so small that the absolute error of
/// [`bivariate_upper`] matters.
fn bivariate_closed(sov: &Sov) -> Option<f64> {
    if sov.has_degenerate() {
        return None;
    }
    let sd = [sov.l[(0, 0)], sov.l[(1, 0)].hypot(sov.l[(1, 1)])];
    let mut hs = [0.0; 2];
    let mut sign = 1.0;
    for i in 0..2 {
        let (a, b) = (sov.a[i], sov.b[i]);
        hs[i] = match (a.is_finite(), b.is_finite()) {
            (true, true) => return None,
            (false, true) => {
                sign = -sign;
                -b / sd[i]
            }
            _ => a / sd[i],
        };
    }
    let p = bivariate_upper(hs[0], hs[1], sign * sov.l[(1, 0)] / sd[1]);
    (p >= 1e-5).then_some(p)
}

struct Quad1 {
    value: f64,
    ga: Vec<f64>,
    gb: Vec<f64>,
    gl: Matrix,
    evals: u64,
}

/// Integrates the 1-D integrand (k = 2) on [0, 1] by tanh-sinh quadrature,
/// halving the step until two levels agree. The integrand has power-law
/// behaviour at an end where the interval is infinite, which the double
/// exponential map absorbs. `shift` keeps values on a safe scale.
fn integrate_k2(sov: &Sov, grad: bool, shift: f64) -> Quad1 {
    const T_MAX: f64 = 4.0;
    const MAX_LEVEL: u32 = 8;
    let k = sov.k;
    let mut tr = Trace::new(k);
    let mut ybar = vec![0.0; k];
    let mut q = Quad1 {
        value: 0.0,
        ga: vec![0.0; if grad { k } else { 0 }],
        gb: vec![0.0; if grad { k } else { 0 }],
        gl: Matrix::zeros(if grad { k } else { 0 }, if grad { k } else { 0 }),
        evals: 0,
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    // adds f(w(t))·w'(t) to the running sums
    let mut add = |t: f64, q: &mut Quad1| {
        let u = half_pi * t.sinh();
        let w = 1.0 / (1.0 + (-2.0 * u).exp());
        let dw = half_pi * t.cosh() / (2.0 * u.cosh().powi(2));
        if dw == 0.0 || !(0.0..=1.0).contains(&w) {
            return;
        }
        let lf = sov.eval(&[w], &mut tr, grad);
        q.evals += 1;
        if lf == f64::NEG_INFINITY {
            return;
        }
        let v = dw * (lf - shift).exp();
        q.value += v;
        if grad {
            sov.reverse(&tr, v, &mut ybar, &mut q.ga, &mut q.gb, &mut q.gl);
        }
    };
    let mut h = 1.0;
    let n0 = T_MAX as i32;
    for j in -n0..=n0 {
        add(f64::from(j), &mut q);
    }
    let mut prev = h * q.value;
    for _ in 0..MAX_LEVEL {
        h *= 0.5;
        // the new level only adds the odd multiples of h
        let n = (T_MAX / h) as i32;
        for j in (-n + 1..n).step_by(2) {
            add(f64::from(j) * h, &mut q);
        }
        let cur = h * q.value;
        // convergence is quadratic in the level, so agreement to δ leaves
        // an error near δ²
        let done = (cur - prev).abs() <= 1e-7 * cur.abs();
        prev = cur;
        if done {
            break;
        }
    }
    q.value *= h;
    if grad {
        q.ga.iter_mut().chain(q.gb.iter_mut()).for_each(|v| *v *= h);
        q.gl *= h;
    }
    q
}

/// Σ̄ from L̄ for Σ = L Lᵀ (symmetric convention).
fn chol_adjoint(l: &Matrix, lbar: &Matrix) -> Matrix {
    let k = l.nrows();
    let mut p = l.transpose() * lbar;
    for i in 0..k {
        for j in i + 1..k {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    let chol = CholFactor { lower: l.clone(), jitter: 0.0 };
    let linv = chol.lower_inverse();
    let a = linv.transpose() * p * linv;
    0.5 * (&a + a.transpose())
}

struct Estimate {
    result: ApproxResult,
    ga: Vec<f64>,
    gb: Vec<f64>,
    gl: Matrix,
}

fn estimate(sov: &Sov, opts: &CdfOptions, grad: bool) -> Result<Estimate> {
    opts.validate()?;
    let start = Instant::now();
    let k = sov.k;
    let mut tr = Trace::new(k);
    let mut ybar = vec![0.0; k];

    if k == 1 {
        let lf = sov.eval(&[], &mut tr, grad);
        let (mut ga, mut gb, mut gl) = (vec![0.0; k], vec![0.0; k], Matrix::zeros(k, k));
        if grad && lf > f64::NEG_INFINITY {
            sov.reverse(&tr, lf.exp(), &mut ybar, &mut ga, &mut gb, &mut gl);
        }
        return Ok(Estimate { result: ApproxResult::exact(lf, 1, start.elapsed()), ga, gb, gl });
    }
    if k == 2 && !grad {
        if let Some(p) = bivariate_closed(sov) {
            return Ok(Estimate {
                result: ApproxResult::exact(p.ln(), 1, start.elapsed()),
                ga: vec![],
                gb: vec![],
                gl: Matrix::zeros(0, 0),
            });
        }
    }
    if k == 2 {
        // scale reference from the midpoint
        let lf0 = sov.eval(&[0.5], &mut tr, false);
        let shift = if lf0.is_finite() { lf0 } else { 0.0 };
        let q = integrate_k2(sov, grad, shift);
        let log_value = if q.value > 0.0 { shift + q.value.ln() } else { f64::NEG_INFINITY };
        let f = (-shift).exp();
        let (ga, gb, gl) = if grad {
            (q.ga.iter().map(|v| v / f).collect(), q.gb.iter().map(|v| v / f).collect(), q.gl / f)
        } else {
            (vec![], vec![], Matrix::zeros(0, 0))
        };
        return Ok(Estimate { result: ApproxResult::exact(log_value, q.evals, start.elapsed()), ga, gb, gl });
    }

    let r = opts.n_replicates;
    let mut rng = prng(opts.seed);
    let mut n_req = 8 * (k + 1);
    let mut used: u64 = 0;
    let mut last: Option<(Accum, u64)> = None;
    let mut status = Status::MaxSamples;
    loop {
        let lattice = korobov_lattice(n_req, k - 1);
        let stage = (lattice.n * r) as u64;
        if last.is_some() && used + stage > opts.max_samples {
            break;
        }
        let mut acc = Accum { log_rep: vec![], shifts: vec![], ga: vec![], gb: vec![], gl: vec![] };
        let mut rule = lattice;
        let mut pts = vec![vec![0.0; k - 1]; rule.n];
        for _ in 0..r {
            for s in rule.shift.iter_mut() {
                *s = rng.random::<f64>();
            }
            for (i, p) in pts.iter_mut().enumerate() {
                rule.point(i, p);
                p.iter_mut().for_each(|x| *x = baker(*x));
            }
            let (lm, shift, ga, gb, gl) = run_replicate(sov, &pts, grad, &mut tr, &mut ybar);
            acc.log_rep.push(lm);
            acc.shifts.push(shift);
            acc.ga.push(ga);
            acc.gb.push(gb);
            acc.gl.push(gl);
        }
        used += stage;
        let (lm, rse) = combine_log_replicates(&acc.log_rep);
        let n_pts = rule.n as u64;
        last = Some((acc, n_pts));
        let est = lm.exp();
        let target = opts.abs_tol.max(opts.rel_tol * est);
        let target_rel = if est > 0.0 { target / est } else { opts.rel_tol };
        if opts.se_multiplier * rse <= target_rel && (opts.rel_tol > 0.0 || opts.abs_tol > 0.0) {
            status = Status::Converged;
            break;
        }
        if lm == f64::NEG_INFINITY {
            status = Status::Converged;
            break;
        }
        n_req = 2 * rule.n;
    }
    let (acc, _) = last.expect("at least one stage");
    let (lm, rse) = combine_log_replicates(&acc.log_rep);
    if rse == 0.0 && status == Status::Converged {
        status = Status::Exact;
    }
    let est = lm.exp();
    // average replicate gradients on the natural scale
    let mut ga = vec![0.0; if grad { k } else { 0 }];
    let mut gb = vec![0.0; if grad { k } else { 0 }];
    let mut gl = Matrix::zeros(if grad { k } else { 0 }, if grad { k } else { 0 });
    if grad {
        for i in 0..r {
            if !acc.shifts[i].is_finite() {
                continue;
            }
            let f = acc.shifts[i].exp() / r as f64;
            for j in 0..k {
                ga[j] += f * acc.ga[i][j];
                gb[j] += f * acc.gb[i][j];
            }
            gl += &acc.gl[i] * f;
        }
    }
    let result = ApproxResult {
        estimate: est,
        std_error: rse * est,
        log_estimate: lm,
        rel_std_error: rse,
        n_evals: used,
        elapsed: start.elapsed(),
        status,
    };
    Ok(Estimate { result, ga, gb, gl })
}

/// Probability of a hyperrectangle under N(mu, sigma).
pub fn mvn_cdf(rect: &HyperRect, mu: &Vector, sigma: &Matrix, opts: &CdfOptions) -> Result<ApproxResult> {
    let sov = Sov::new(rect, mu, sigma, opts.reorder)?;
    Ok(estimate(&sov, opts, false)?.result)
}

/// Same as `mvn_cdf`; two-sided bounds are the general case.
pub fn mvn_interval(rect: &HyperRect, mu: &Vector, sigma: &Matrix, opts: &CdfOptions) -> Result<ApproxResult> {
    mvn_cdf(rect, mu, sigma, opts)
}

/// Probability and its gradients with respect to both bounds, the mean and
/// the covariance, from the same lattice points.
pub fn mvn_interval_grad(rect: &HyperRect, mu: &Vector, sigma: &Matrix, opts: &CdfOptions) -> Result<IntervalGrad> {
    let sov = Sov::new(rect, mu, sigma, opts.reorder)?;
    if sov.has_degenerate() {
        return Err(Error::NotPositiveDefinite { index: sov.det.iter().position(|&d| d).unwrap_or(0), pivot: 0.0 });
    }
    let e = estimate(&sov, opts, true)?;
    let k = sov.k;
    let mut d_lower = Vector::zeros(k);
    let mut d_upper = Vector::zeros(k);
    for i in 0..k {
        d_lower[sov.perm[i]] = e.ga[i];
        d_upper[sov.perm[i]] = e.gb[i];
    }
    let d_mu = -(&d_lower + &d_upper);
    let sbar = chol_adjoint(&sov.l, &e.gl);
    let mut d_sigma = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            d_sigma[(sov.perm[i], sov.perm[j])] = sbar[(i, j)];
        }
    }
    // exact symmetry
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (d_sigma[(i, j)] + d_sigma[(j, i)]);
            d_sigma[(i, j)] = v;
            d_sigma[(j, i)] = v;
        }
    }
    Ok(IntervalGrad { prob: e.result, d_lower, d_upper, d_mu, d_sigma })
}

/// `P(X ≤ upper)` with gradients in the mean and covariance.
pub fn mvn_cdf_grad(upper: &Vector, mu: &Vector, sigma: &Matrix, opts: &CdfOptions) -> Result<CdfGrad> {
    let g = mvn_interval_grad(&HyperRect::orthant(upper.clone()), mu, sigma, opts)?;
    Ok(CdfGrad { prob: g.prob, d_mu: g.d_mu, d_sigma: g.d_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::cholesky;

    fn mat(n: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(n, n, v)
    }

    #[test]
    fn one_dim_exact() {
        let r = mvn_cdf(&HyperRect::orthant(Vector::from_vec(vec![0.0])), &Vector::zeros(1), &mat(1, &[1.0]), &CdfOptions::default())
            .unwrap();
        assert_eq!(r.estimate, 0.5);
        assert_eq!(r.status, Status::Exact);
    }

    #[test]
    fn orthant_rho_half() {
        let s = mat(2, &[1.0, 0.5, 0.5, 1.0]);
        let r = mvn_cdf(&HyperRect::orthant(Vector::zeros(2)), &Vector::zeros(2), &s, &CdfOptions::default()).unwrap();
        assert!((r.estimate - 1.0 / 3.0).abs() < 1e-12, "{}", r.estimate);
    }

    #[test]
    fn diagonal_is_product() {
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 4.0, 0.25]));
        let rect = HyperRect::new(Vector::from_vec(vec![-1.0, -2.0, 0.1]), Vector::from_vec(vec![0.5, 3.0, 1.0])).unwrap();
        let mu = Vector::from_vec(vec![0.1, 0.0, 0.3]);
        let want: f64 = (0..3)
            .map(|i| {
                let sd = s[(i, i)].sqrt();
                norm_cdf((rect.upper[i] - mu[i]) / sd) - norm_cdf((rect.lower[i] - mu[i]) / sd)
            })
            .product();
        let chol = cholesky(&s).unwrap();
        let f = sov_integrand(&rect, &mu, &chol, &[0.3, 0.9]);
        assert!((f - want).abs() < 1e-15);
        let r = mvn_cdf(&rect, &mu, &s, &CdfOptions::default()).unwrap();
        assert!((r.estimate - want).abs() < 1e-14);
    }

    #[test]
    fn hand_trace_k3() {
        let s = mat(3, &[1.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 1.5]);
        let chol = cholesky(&s).unwrap();
        let l = &chol.lower;
        let rect = HyperRect::new(Vector::from_vec(vec![-1.0, f64::NEG_INFINITY, -0.5]), Vector::from_vec(vec![1.0, 0.7, 2.0])).unwrap();
        let mu = Vector::zeros(3);
        let w = [0.3, 0.8];
        // step 1
        let (l1, u1) = (norm_cdf(-1.0 / l[(0, 0)]), norm_cdf(1.0 / l[(0, 0)]));
        let y1 = norm_quantile(l1 + w[0] * (u1 - l1));
        let (l2, u2) = (0.0, norm_cdf((0.7 - l[(1, 0)] * y1) / l[(1, 1)]));
        let y2 = norm_quantile(l2 + w[1] * (u2 - l2));
        let s3 = l[(2, 0)] * y1 + l[(2, 1)] * y2;
        let (l3, u3) = (norm_cdf((-0.5 - s3) / l[(2, 2)]), norm_cdf((2.0 - s3) / l[(2, 2)]));
        let want = (u1 - l1) * (u2 - l2) * (u3 - l3);
        let got = sov_integrand(&rect, &mu, &chol, &w);
        assert!((got - want).abs() < 1e-14 * want, "{got} {want}");
    }

    #[test]
    fn exchangeable_keeps_identity() {
        let s = mat(3, &[1.0, 0.3, 0.3, 0.3, 1.0, 0.3, 0.3, 0.3, 1.0]);
        let p = reorder_variables(&HyperRect::orthant(Vector::from_element(3, 0.4)), &Vector::zeros(3), &s).unwrap();
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn diagonal_sorted_by_probability() {
        let s = Matrix::identity(3, 3);
        let rect = HyperRect::new(Vector::from_vec(vec![-2.0, -0.5, -1.0]), Vector::from_vec(vec![2.0, 0.5, 1.0])).unwrap();
        assert_eq!(reorder_variables(&rect, &Vector::zeros(3), &s).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn univariate_gradient() {
        let sd = 1.7;
        let (b, mu) = (0.4, -0.2);
        let g = mvn_cdf_grad(&Vector::from_vec(vec![b]), &Vector::from_vec(vec![mu]), &mat(1, &[sd * sd]), &CdfOptions::default())
            .unwrap();
        let z = (b - mu) / sd;
        assert!((g.d_mu[0] + crate::numeric::norm_pdf(z) / sd).abs() < 1e-15);
        let dvar = -crate::numeric::norm_pdf(z) * z / (2.0 * sd * sd);
        assert!((g.d_sigma[(0, 0)] - dvar).abs() < 1e-15);
    }

    #[test]
    fn bivariate_gradient_matches_differences() {
        let s = mat(2, &[1.0, 0.4, 0.4, 2.0]);
        let b = Vector::from_vec(vec![0.3, -0.2]);
        let mu = Vector::from_vec(vec![0.1, 0.2]);
        let o = CdfOptions::default();
        let g = mvn_cdf_grad(&b, &mu, &s, &o).unwrap();
        let p = |b: &Vector, mu: &Vector, s: &Matrix| mvn_cdf(&HyperRect::orthant(b.clone()), mu, s, &o).unwrap().estimate;
        let h = 1e-5;
        for i in 0..2 {
            let mut mp = mu.clone();
            mp[i] += h;
            let mut mm = mu.clone();
            mm[i] -= h;
            let fd = (p(&b, &mp, &s) - p(&b, &mm, &s)) / (2.0 * h);
            assert!((fd - g.d_mu[i]).abs() < 1e-8, "mu {i}: {fd} {}", g.d_mu[i]);
        }
        let mut sp = s.clone();
        sp[(0, 1)] += h;
        sp[(1, 0)] += h;
        let mut sm = s.clone();
        sm[(0, 1)] -= h;
        sm[(1, 0)] -= h;
        let fd = (p(&b, &mu, &sp) - p(&b, &mu, &sm)) / (2.0 * h);
        assert!((fd - 2.0 * g.d_sigma[(0, 1)]).abs() < 1e-8, "{fd} {}", g.d_sigma[(0, 1)]);
    }

    #[test]
    fn degenerate_repeated_row() {
        // X2 = X1 exactly: P(X1 ≤ 0, X2 ≤ 1) = P(X1 ≤ 0)
        let s = mat(3, &[1.0, 1.0, 0.2, 1.0, 1.0, 0.2, 0.2, 0.2, 1.0]);
        let r = mvn_cdf(&HyperRect::orthant(Vector::from_vec(vec![0.0, 1.0, 10.0])), &Vector::zeros(3), &s, &CdfOptions::default())
            .unwrap();
        assert!((r.estimate - 0.5).abs() < 1e-6, "{}", r.estimate);
    }

    #[test]
    fn not_pd_rejected() {
        let s = mat(2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            mvn_cdf(&HyperRect::whole(2), &Vector::zeros(2), &s, &CdfOptions::default()),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn bivariate_closed_matches_quadrature() {
        let mut rng = prng(17);
        for _ in 0..400 {
            let r: f64 = rng.random_range(-0.99..0.99);
            let s = mat(2, &[1.3, r * 1.3f64.sqrt() * 0.7, r * 1.3f64.sqrt() * 0.7, 0.49]);
            let mut lo = Vector::from_element(2, f64::NEG_INFINITY);
            let mut hi = Vector::from_element(2, f64::INFINITY);
            for i in 0..2 {
                let v = rng.random_range(-3.0..3.0);
                if rng.random::<bool>() {
                    lo[i] = v;
                } else {
                    hi[i] = v;
                }
            }
            let rect = HyperRect::new(lo, hi).unwrap();
            let mu = Vector::from_element(2, 0.2);
            let sov = Sov::new(&rect, &mu, &s, true).unwrap();
            let Some(p) = bivariate_closed(&sov) else { continue };
            let q = estimate(&sov, &CdfOptions::default(), true).unwrap().result.estimate;
            assert!((p - q).abs() <= 1e-12 * q.max(1e-3), "{p} {q} r={r}");
        }
    }

    fn equicorrelated(k: usize, rho: f64) -> Matrix {
        Matrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn orthant_equicorrelated_high_dim() {
        for k in [3, 5, 10, 20] {
            let o = CdfOptions { rel_tol: 1e-4, ..CdfOptions::default() };
            let r = mvn_cdf(&HyperRect::orthant(Vector::zeros(k)), &Vector::zeros(k), &equicorrelated(k, 0.5), &o).unwrap();
            let want = 1.0 / (k as f64 + 1.0);
            assert!((r.estimate - want).abs() < 5.0 * r.std_error.max(1e-7), "k={k}: {} vs {want} (se {})", r.estimate, r.std_error);
            assert!(r.status == Status::MaxSamples || r.rel_std_error < 1e-4 / 3.0, "k={k}: {:?}", r);
        }
    }

    #[test]
    fn gradient_matches_differences_k4() {
        let k = 4;
        let s = Matrix::from_fn(k, k, |i, j| 0.6f64.powi((i as i32 - j as i32).abs()) * if i == j { 1.5 } else { 1.0 });
        let b = Vector::from_vec(vec![0.3, -0.2, 1.0, 0.5]);
        let a = Vector::from_vec(vec![-1.0, f64::NEG_INFINITY, -0.5, -2.0]);
        let mu = Vector::from_vec(vec![0.1, 0.2, -0.1, 0.0]);
        let o = CdfOptions::fixed(200_000, 7);
        let rect = HyperRect::new(a.clone(), b.clone()).unwrap();
        let g = mvn_interval_grad(&rect, &mu, &s, &o).unwrap();
        let p = |a: &Vector, b: &Vector, mu: &Vector, s: &Matrix| {
            mvn_cdf(&HyperRect::new(a.clone(), b.clone()).unwrap(), mu, s, &o).unwrap().estimate
        };
        let h = 1e-6;
        for i in 0..k {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let fd = (p(&a, &bp, &mu, &s) - p(&a, &bm, &mu, &s)) / (2.0 * h);
            assert!((fd - g.d_upper[i]).abs() < 1e-6, "upper {i}: {fd} {}", g.d_upper[i]);
            for j in 0..=i {
                let (mut sp, mut sm) = (s.clone(), s.clone());
                sp[(i, j)] += h;
                sm[(i, j)] -= h;
                if i != j {
                    sp[(j, i)] += h;
                    sm[(j, i)] -= h;
                }
                let fd = (p(&a, &b, &mu, &sp) - p(&a, &b, &mu, &sm)) / (2.0 * h);
                let an = if i == j { g.d_sigma[(i, i)] } else { 2.0 * g.d_sigma[(i, j)] };
                assert!((fd - an).abs() < 1e-6, "sigma {i},{j}: {fd} {an}");
            }
        }
        let lower_i = 0;
        let (mut ap, mut am) = (a.clone(), a.clone());
        ap[lower_i] += h;
        am[lower_i] -= h;
        let fd = (p(&ap, &b, &mu, &s) - p(&am, &b, &mu, &s)) / (2.0 * h);
        assert!((fd - g.d_lower[lower_i]).abs() < 1e-6);
    }

    #[test]
    fn far_tail_stays_finite() {
        let k = 5;
        let r = mvn_cdf(&HyperRect::orthant(Vector::from_element(k, -12.0)), &Vector::zeros(k), &equicorrelated(k, 0.3), &CdfOptions::default())
            .unwrap();
        assert!(r.log_estimate.is_finite() && r.log_estimate < -80.0, "{:?}", r);
    }
}
