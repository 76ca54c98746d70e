use std::sync::Arc;

use super::quadrature::{ghq_rule, QuadratureRule};
use super::LogIntegrand;
use crate::error::{Error, Result};
use crate::mvn_cdf::log_interval_prob;
use crate::numeric::{inv_mills, norm_log_cdf, norm_log_pdf, Matrix, Vector};

/// Contribution of one row as a function of its linear predictor `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    /// `succ·log Φ(t) + fail·log Φ(−t)`.
    Binary { succ: f64, fail: f64 },
    /// `log(Φ(hi + t) − Φ(lo + t))`; either bound may be infinite.
    Interval { lo: f64, hi: f64 },
}

impl Term {
    /// Value with first and second derivative in `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        match *self {
            Term::Binary { succ, fail } => {
                let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
                if succ != 0.0 {
                    let l = inv_mills(t);
                    v += succ * norm_log_cdf(t);
                    d1 += succ * l;
                    d2 -= succ * l * (l + t);
                }
                if fail != 0.0 {
                    let l = inv_mills(-t);
                    v += fail * norm_log_cdf(-t);
                    d1 -= fail * l;
                    d2 -= fail * l * (l - t);
                }
                (v, d1, d2)
            }
            Term::Interval { lo, hi } => {
                let (a, b) = (lo + t, hi + t);
                let lf = log_interval_prob(a, b);
                if lf == f64::NEG_INFINITY {
                    return (lf, 0.0, 0.0);
                }
                let rb = if b.is_finite() { (norm_log_pdf(b) - lf).exp() } else { 0.0 };
                let ra = if a.is_finite() { (norm_log_pdf(a) - lf).exp() } else { 0.0 };
                let d1 = rb - ra;
                let mut d2 = -d1 * d1;
                if rb != 0.0 {
                    d2 -= b * rb;
                }
                if ra != 0.0 {
                    d2 += a * ra;
                }
                (lf, d1, d2)
            }
        }
    }
}

/// `h(u) = Π_i exp(term_i(offset_i + z_iᵀ u))`, one probit factor per row.
#[derive(Debug, Clone)]
pub struct ProbitRows {
    pub offset: Vector,
    pub loading: Matrix,
    pub terms: Vec<Term>,
}

impl ProbitRows {
    pub fn new(offset: Vector, loading: Matrix, terms: Vec<Term>) -> Result<Self> {
        if offset.len() != loading.nrows() || terms.len() != offset.len() {
            return Err(Error::DimensionMismatch(format!(
                "offset {}, loading rows {}, terms {}",
                offset.len(),
                loading.nrows(),
                terms.len()
            )));
        }
        Ok(Self { offset, loading, terms })
    }

    pub fn n_rows(&self) -> usize {
        self.terms.len()
    }

    fn predictor(&self, u: &[f64], i: usize) -> f64 {
        let mut t = self.offset[i];
        for (j, &uj) in u.iter().enumerate() {
            t += self.loading[(i, j)] * uj;
        }
        t
    }
}

impl LogIntegrand for ProbitRows {
    fn dim(&self) -> usize {
        self.loading.ncols()
    }

    fn log_h(&self, u: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, term) in self.terms.iter().enumerate() {
            let t = self.predictor(u, i);
            s += match *term {
                Term::Binary { succ, fail } => {
                    let mut v = 0.0;
                    if succ != 0.0 {
                        v += succ * norm_log_cdf(t);
                    }
                    if fail != 0.0 {
                        v += fail * norm_log_cdf(-t);
                    }
                    v
                }
                Term::Interval { lo, hi } => log_interval_prob(lo + t, hi + t),
            };
            if s == f64::NEG_INFINITY {
                break;
            }
        }
        s
    }

    fn log_h_derivs(&self, u: &[f64], grad: &mut [f64], mut hess: Option<&mut Matrix>) -> f64 {
        let k = self.dim();
        grad.iter_mut().for_each(|g| *g = 0.0);
        if let Some(h) = hess.as_deref_mut() {
            h.fill(0.0);
        }
        let mut s = 0.0;
        for (i, term) in self.terms.iter().enumerate() {
            let t = self.predictor(u, i);
            let (v, d1, d2) = term.eval(t);
            s += v;
            for j in 0..k {
                grad[j] += d1 * self.loading[(i, j)];
            }
            if let Some(h) = hess.as_deref_mut() {
                for a in 0..k {
                    let za = d2 * self.loading[(i, a)];
                    for b in 0..=a {
                        h[(a, b)] += za * self.loading[(i, b)];
                    }
                }
            }
        }
        if let Some(h) = hess {
            for a in 0..k {
                for b in 0..a {
                    h[(b, a)] = h[(a, b)];
                }
            }
        }
        s
    }

    fn linear_structure(&self) -> Option<(Matrix, Arc<dyn LogIntegrand>)> {
        let n = self.n_rows();
        let reduced = ProbitRows { offset: self.offset.clone(), loading: Matrix::identity(n, n), terms: self.terms.clone() };
        Some((self.loading.clone(), Arc::new(reduced)))
    }
}

/// Mode and scale of `ψ(a) = −a²/2 + f(a)` by safeguarded Newton, where
/// `df` returns `(f, f′, f″)`.
fn inner_mode(df: impl Fn(f64) -> (f64, f64, f64)) -> (f64, f64) {
    let psi = |a: f64| -0.5 * a * a + df(a).0;
    let mut a = 0.0;
    let mut d2 = -1.0;
    for _ in 0..100 {
        let (_, f1, f2) = df(a);
        let d1 = -a + f1;
        d2 = -1.0 + f2;
        let curv = if d2 < -1e-3 { d2 } else { -1.0 };
        let f0 = psi(a);
        let mut next = a - d1 / curv;
        let mut tries = 0;
        while psi(next) < f0 - 1e-12 * (1.0 + f0.abs()) && tries < 50 {
            next = a + 0.5 * (next - a);
            tries += 1;
        }
        let done = (next - a).abs() <= 1e-12 * (1.0 + a.abs());
        a = next;
        if done {
            break;
        }
    }
    (a, 1.0 / (-d2).max(1e-3).sqrt())
}

/// Value, gradient and Hessian of `log h(s)`, `h = ∫ φ(a) Π_j Φ(a + s_j) da`,
/// by Gauss-Hermite quadrature centred at the mode of the integrand in `a`.
/// When `h > 1/2` the rule is applied to `1 − h = ∫ φ(a)(1 − Π_j Φ(a + s_j)) da`
/// instead, which keeps the error proportional to the smaller of the two.
/// Derivatives are those of the quadrature sum with the nodes held fixed.
fn inner_aghq(s: &[f64], rule: &QuadratureRule, want_hess: bool) -> (f64, Vec<f64>, Option<Matrix>) {
    let m = s.len();
    let log_p = |a: f64| -> (f64, f64, f64) {
        // log P, (log P)′, (log P)″ for P(a) = Π Φ(a + s_j)
        let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for &sj in s {
            let t = a + sj;
            let l = inv_mills(t);
            v += norm_log_cdf(t);
            d1 += l;
            d2 -= l * (l + t);
        }
        (v, d1, d2)
    };
    let b = rule.nodes.len();
    let mut lw = vec![0.0; b];
    let mut lp = vec![0.0; b];
    let mut ds = vec![vec![0.0; m]; b];
    let mut es = vec![vec![0.0; m]; b];
    let mut fill = |a0: f64, sd: f64, lw: &mut [f64], lp: &mut [f64]| {
        for l in 0..b {
            let x = rule.nodes[l];
            let al = a0 + sd * x;
            lw[l] = rule.weights[l].ln() + sd.ln() + 0.5 * x * x - 0.5 * al * al;
            let mut v = 0.0;
            for j in 0..m {
                let t = al + s[j];
                v += norm_log_cdf(t);
                let lam = inv_mills(t);
                ds[l][j] = lam;
                es[l][j] = -lam * (lam + t);
            }
            lp[l] = v;
        }
    };

    let (a0, sd) = inner_mode(log_p);
    fill(a0, sd, &mut lw, &mut lp);
    let terms: Vec<f64> = (0..b).map(|l| lw[l] + lp[l]).collect();
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut log_h = mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();

    if log_h > -std::f64::consts::LN_2 {
        // complement integrand log(1 − P) with its derivatives
        let log_q = |a: f64| -> (f64, f64, f64) {
            let (v, d1, d2) = log_p(a);
            let q = -v.exp_m1();
            let r = v.exp() / q;
            // P′ = P d1, P″ = P (d1² + d2)
            (q.ln(), -r * d1, -r * (d1 * d1 + d2) - (r * d1).powi(2))
        };
        let (c0, csd) = inner_mode(log_q);
        let mut clw = vec![0.0; b];
        let mut clp = vec![0.0; b];
        fill(c0, csd, &mut clw, &mut clp);
        let comp: f64 = (0..b).map(|l| clw[l].exp() * -clp[l].exp_m1()).sum();
        if comp > 0.0 && comp < 0.5 {
            lw = clw;
            lp = clp;
            log_h = (-comp).ln_1p();
        } else {
            fill(a0, sd, &mut lw, &mut lp);
        }
    }

    // ∇h and ∇²h are sums of ω_l P_l (·) over the nodes in use
    let pis: Vec<f64> = (0..b).map(|l| (lw[l] + lp[l] - log_h).exp()).collect();
    let mut grad = vec![0.0; m];
    for l in 0..b {
        for j in 0..m {
            grad[j] += pis[l] * ds[l][j];
        }
    }
    let hess = want_hess.then(|| {
        let mut h = Matrix::zeros(m, m);
        for l in 0..b {
            let p = pis[l];
            for i in 0..m {
                h[(i, i)] += p * es[l][i];
                for j in 0..m {
                    h[(i, j)] += p * ds[l][i] * ds[l][j];
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                h[(i, j)] -= grad[i] * grad[j];
            }
        }
        h
    });
    (log_h, grad, hess)
}

/// One individual's conditional probability of its observed category,
/// `∫ φ(a) Φ^{(c−1)}(1a + η + K u) da`, by `b`-node adaptive Gauss-Hermite
/// quadrature. Returns `log h` with its gradient and Hessian in `u`.
pub fn multinomial_integrand(eta: &Vector, kmat: &Matrix, u: &Vector, b: usize) -> Result<(f64, Vector, Matrix)> {
    if kmat.nrows() != eta.len() || kmat.ncols() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "eta {}, K {}x{}, u {}",
            eta.len(),
            kmat.nrows(),
            kmat.ncols(),
            u.len()
        )));
    }
    let rule = ghq_rule(b)?;
    let s = eta + kmat * u;
    let (lh, gs, hs) = inner_aghq(s.as_slice(), &rule, true);
    let gs = Vector::from_vec(gs);
    let hs = hs.expect("requested");
    Ok((lh, kmat.transpose() * gs, kmat.transpose() * hs * kmat))
}

/// `log h(s)` and its gradient in `s` for `h(s) = ∫ φ(a) Π_j Φ(a + s_j) da`,
/// by the same quadrature as `multinomial_integrand`.
pub fn multinomial_log_prob(s: &[f64], rule: &QuadratureRule) -> (f64, Vec<f64>) {
    let (v, g, _) = inner_aghq(s, rule, false);
    (v, g)
}

/// Product over individuals of `multinomial_integrand`.
#[derive(Debug, Clone)]
pub struct MultinomialRows {
    pub eta: Vec<Vector>,
    pub kmats: Vec<Matrix>,
    rule: QuadratureRule,
    dim: usize,
}

impl MultinomialRows {
    pub fn new(eta: Vec<Vector>, kmats: Vec<Matrix>, nodes: usize) -> Result<Self> {
        if eta.len() != kmats.len() || eta.is_empty() {
            return Err(Error::DimensionMismatch(format!("{} offsets, {} loadings", eta.len(), kmats.len())));
        }
        let dim = kmats[0].ncols();
        for (e, k) in eta.iter().zip(&kmats) {
            if k.nrows() != e.len() || k.ncols() != dim {
                return Err(Error::DimensionMismatch(format!("loading {}x{} for offset {}", k.nrows(), k.ncols(), e.len())));
            }
        }
        Ok(Self { eta, kmats, rule: ghq_rule(nodes)?, dim })
    }

    pub fn nodes(&self) -> usize {
        self.rule.nodes.len()
    }
}

impl LogIntegrand for MultinomialRows {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_h(&self, u: &[f64]) -> f64 {
        let u = Vector::from_column_slice(u);
        self.eta
            .iter()
            .zip(&self.kmats)
            .map(|(e, k)| {
                let s = e + k * &u;
                inner_aghq(s.as_slice(), &self.rule, false).0
            })
            .sum()
    }

    fn log_h_derivs(&self, u: &[f64], grad: &mut [f64], mut hess: Option<&mut Matrix>) -> f64 {
        let uv = Vector::from_column_slice(u);
        grad.iter_mut().for_each(|g| *g = 0.0);
        if let Some(h) = hess.as_deref_mut() {
            h.fill(0.0);
        }
        let mut total = 0.0;
        for (e, k) in self.eta.iter().zip(&self.kmats) {
            let s = e + k * &uv;
            let (lh, gs, hs) = inner_aghq(s.as_slice(), &self.rule, hess.is_some());
            total += lh;
            let g = k.transpose() * Vector::from_vec(gs);
            for j in 0..self.dim {
                grad[j] += g[j];
            }
            if let (Some(h), Some(hs)) = (hess.as_deref_mut(), hs) {
                *h += k.transpose() * hs * k;
            }
        }
        total
    }

    fn linear_structure(&self) -> Option<(Matrix, Arc<dyn LogIntegrand>)> {
        let rows: usize = self.kmats.iter().map(|k| k.nrows()).sum();
        let mut z = Matrix::zeros(rows, self.dim);
        let mut kmats = Vec::with_capacity(self.kmats.len());
        let mut r = 0;
        for k in &self.kmats {
            z.rows_mut(r, k.nrows()).copy_from(k);
            let mut sel = Matrix::zeros(k.nrows(), rows);
            for i in 0..k.nrows() {
                sel[(i, r + i)] = 1.0;
            }
            kmats.push(sel);
            r += k.nrows();
        }
        let reduced = MultinomialRows { eta: self.eta.clone(), kmats, rule: self.rule.clone(), dim: rows };
        Some((z, Arc::new(reduced)))
    }
}
