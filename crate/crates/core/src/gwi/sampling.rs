use std::time::Instant;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use super::{find_mode, laplace_from_mode, GwiProblem, McOptions, Transform};
use crate::error::Result;
use crate::estimate::{combine_log_replicates, ApproxResult, LogMeanAcc, Status};
use crate::numeric::{norm_quantile, Matrix, Vector};
use crate::sequences::{antithetic_scale, prng, sub_seed, Prng, SobolGenerator};

type Observer<'a> = &'a mut dyn FnMut(&[f64], f64, f64);

fn noop(_: &[f64], _: f64, _: f64) {}

/// Transform and starting shift for an engine run.
fn setup(p: &GwiProblem, adaptive: bool, eigen: bool) -> Result<(Transform, Option<f64>)> {
    if adaptive {
        let m = find_mode(p)?;
        let shift = laplace_from_mode(p.dim(), &m);
        let t = if eigen { Transform::adaptive_eigen(&m)? } else { Transform::adaptive(&m) };
        Ok((t, Some(shift)))
    } else {
        let t = if eigen { Transform::prior_eigen(p)? } else { Transform::prior(p) };
        Ok((t, None))
    }
}

fn finish(acc_log: f64, rse: f64, n_evals: u64, start: Instant, converged: bool) -> ApproxResult {
    let estimate = acc_log.exp();
    let status = if rse == 0.0 {
        Status::Exact
    } else if converged {
        Status::Converged
    } else {
        Status::MaxSamples
    };
    ApproxResult {
        estimate,
        std_error: rse * estimate,
        log_estimate: acc_log,
        rel_std_error: rse,
        n_evals,
        elapsed: start.elapsed(),
        status,
    }
}

/// Draws i.i.d. samples until the relative error target or the evaluation
/// cap. Each sample is a list of `(log ratio, weight)` terms whose weighted
/// sum is one unbiased estimate of `L`.
fn run_iid(
    opts: &McOptions,
    shift: Option<f64>,
    evals_per_sample: u64,
    mut sample: impl FnMut(&mut Prng, &mut Vec<(f64, f64)>),
) -> ApproxResult {
    let start = Instant::now();
    let mut rng = prng(opts.seed);
    let mut acc = shift.map_or_else(LogMeanAcc::new, LogMeanAcc::with_shift);
    let mut terms = Vec::new();
    let mut evals = 0u64;
    let mut check_at = 16u64;
    let target = opts.target_rse();
    let mut converged = false;
    loop {
        terms.clear();
        sample(&mut rng, &mut terms);
        evals += evals_per_sample;
        let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            acc.push(m);
        } else {
            let s: f64 = terms.iter().map(|&(l, w)| w * (l - m).exp()).sum();
            if s == 0.0 {
                acc.push(f64::NEG_INFINITY);
            } else {
                acc.push_weighted(m + s.abs().ln(), s.signum());
            }
        }
        if acc.count() >= check_at {
            check_at *= 2;
            if opts.rel_tol > 0.0 && acc.rel_std_error() <= target {
                converged = true;
                break;
            }
        }
        if evals + evals_per_sample > opts.max_samples {
            break;
        }
    }
    let rse = acc.rel_std_error();
    finish(acc.log_mean(), rse, evals, start, converged)
}

fn std_normal_vec(rng: &mut Prng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Importance sampling from `N(û, (−Ĥ)⁻¹)` (or the weight itself when not
/// adaptive), each draw expanded to four antithetic points.
pub fn importance_sample(p: &GwiProblem, opts: &McOptions) -> Result<ApproxResult> {
    importance_sample_observed(p, opts, &mut noop)
}

pub fn importance_sample_observed(p: &GwiProblem, opts: &McOptions, obs: Observer) -> Result<ApproxResult> {
    let (t, shift) = setup(p, opts.adaptive, false)?;
    let k = p.dim();
    let mut u = Vector::zeros(k);
    let mut x = vec![0.0; k];
    Ok(run_iid(opts, shift, 4, |rng, terms| {
        let z = std_normal_vec(rng, k);
        let r2: f64 = z.iter().map(|v| v * v).sum();
        let s = antithetic_scale(r2, k);
        for f in [1.0, -1.0, s, -s] {
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi = f * zi;
            }
            let lr = t.log_ratio(p, &x, &mut u);
            obs(u.as_slice(), lr, 0.25);
            terms.push((lr, 0.25));
        }
    }))
}

/// Degree-5 rule on the unit sphere, normalized to the uniform measure:
/// the `K+1` simplex vertices and their negatives, each with weight
/// `K(7−K)/(2(K+1)²(K+2))`, and the `K(K+1)/2` normalized edge midpoints
/// and their negatives, each with weight `2(K−1)²/(K(K+1)²(K+2))`.
#[derive(Debug, Clone)]
pub struct SphericalRule {
    pub points: Vec<Vector>,
    pub weights: Vec<f64>,
}

pub fn spherical_radial_rule(k: usize) -> SphericalRule {
    let kf = k as f64;
    // regular simplex with vertices on the unit sphere (1-based formula)
    let mut verts = vec![Vector::zeros(k); k + 1];
    for i in 1..=k + 1 {
        for j in 1..=k {
            let v = if j < i {
                -((kf + 1.0) / (kf * (kf - j as f64 + 2.0) * (kf - j as f64 + 1.0))).sqrt()
            } else if j == i {
                ((kf + 1.0) * (kf - i as f64 + 1.0) / (kf * (kf - i as f64 + 2.0))).sqrt()
            } else {
                0.0
            };
            verts[i - 1][j - 1] = v;
        }
    }
    let wv = kf * (7.0 - kf) / (2.0 * (kf + 1.0).powi(2) * (kf + 2.0));
    let wm = 2.0 * (kf - 1.0).powi(2) / (kf * (kf + 1.0).powi(2) * (kf + 2.0));
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for v in &verts {
        points.push(v.clone());
        points.push(-v);
        weights.extend([wv, wv]);
    }
    if k > 1 {
        for i in 0..=k {
            for j in i + 1..=k {
                let m = (&verts[i] + &verts[j]).normalize();
                points.push(-&m);
                points.push(m);
                weights.extend([wm, wm]);
            }
        }
    }
    SphericalRule { points, weights }
}

/// Haar-distributed orthogonal matrix as a product of Householder
/// reflections of random normal vectors; the reflection vector takes the
/// sign of the leading entry so it never cancels.
pub fn random_rotation(k: usize, rng: &mut Prng) -> Matrix {
    let mut q = Matrix::identity(k, k);
    for c in 0..k.saturating_sub(1) {
        let n = k - c;
        let mut v = Vector::from_vec(std_normal_vec(rng, n));
        let norm = v.norm();
        let sgn = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sgn * norm;
        let vn2 = v.norm_squared();
        if vn2 == 0.0 {
            continue;
        }
        // q ← q·diag(I, −sgn·(I − 2vvᵀ/vᵀv)) on the trailing block
        let mut block = q.columns_mut(c, n);
        let qv = &block * &v;
        block.ger(-2.0 / vn2, &qv, &v, 1.0);
        if sgn > 0.0 {
            block.scale_mut(-1.0);
        }
    }
    if k > 0 && rng.random::<bool>() {
        q.column_mut(k - 1).scale_mut(-1.0);
    }
    q
}

/// Radii `(t₁, t₂)` of the stochastic radial rule for `‖x‖² ~ χ²_K`, with
/// joint density proportional to `χ²_K(t₁)χ²_K(t₂)·t₁t₂(t₁−t₂)²`, drawn by
/// rejection from the mixture of `χ²_{K+6} × χ²_{K+2}` and its swap.
fn radial_pair(k: usize, rng: &mut Prng) -> (f64, f64) {
    let kf = k as f64;
    let hi = ChiSquared::new(kf + 6.0).expect("positive dof");
    let lo = ChiSquared::new(kf + 2.0).expect("positive dof");
    loop {
        let (a, b) = (hi.sample(rng), lo.sample(rng));
        let (t1, t2) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        let acc = (t1 - t2).powi(2) / (t1 * t1 + t2 * t2);
        if rng.random::<f64>() < acc {
            return (t1, t2);
        }
    }
}

impl SphericalRule {
    /// One randomized degree-5 estimate of `E f(X)`, `X ~ N(0, I)`, as
    /// points with signed weights. Radial weights interpolate at
    /// `{0, t₁, t₂}` against `E‖X‖² = K`, `E‖X‖⁴ = K(K+2)`.
    pub fn sample(&self, rng: &mut Prng, n_rotations: usize, out: &mut Vec<(Vector, f64)>) {
        let k = self.points[0].len();
        let kf = k as f64;
        let (m1, m2) = (kf, kf * (kf + 2.0));
        let (t1, t2) = radial_pair(k, rng);
        let w1 = (m2 - t2 * m1) / (t1 * (t1 - t2));
        let w2 = (m2 - t1 * m1) / (t2 * (t2 - t1));
        let w0 = 1.0 - w1 - w2;
        let (r1, r2) = (t1.sqrt(), t2.sqrt());
        out.clear();
        out.push((Vector::zeros(k), w0));
        let nr = n_rotations.max(1);
        for _ in 0..nr {
            let q = random_rotation(k, rng);
            for (s, &w) in self.points.iter().zip(&self.weights) {
                let d = &q * s;
                out.push((&d * r1, w * w1 / nr as f64));
                out.push((&d * r2, w * w2 / nr as f64));
            }
        }
    }
}

/// Stochastic spherical-radial rule of degree 5.
pub fn spherical_radial(p: &GwiProblem, opts: &McOptions) -> Result<ApproxResult> {
    spherical_radial_observed(p, opts, &mut noop)
}

pub fn spherical_radial_observed(p: &GwiProblem, opts: &McOptions, obs: Observer) -> Result<ApproxResult> {
    let (t, shift) = setup(p, opts.adaptive, false)?;
    let k = p.dim();
    let rule = spherical_radial_rule(k);
    let per = 1 + 2 * rule.points.len() as u64 * opts.n_rotations.max(1) as u64;
    let mut u = Vector::zeros(k);
    let mut pts = Vec::new();
    Ok(run_iid(opts, shift, per, |rng, terms| {
        rule.sample(rng, opts.n_rotations, &mut pts);
        for (x, w) in &pts {
            let lr = t.log_ratio(p, x.as_slice(), &mut u);
            obs(u.as_slice(), lr, *w);
            terms.push((lr, *w));
        }
    }))
}

/// Randomized QMC with independently scrambled Sobol sequences, mapped
/// through `Φ⁻¹` and then `Q Λ^{1/2}` so the leading Sobol coordinates
/// follow the directions of largest variance. Points per replicate double
/// each stage, reusing the earlier prefix.
pub fn rqmc(p: &GwiProblem, opts: &McOptions) -> Result<ApproxResult> {
    rqmc_observed(p, opts, &mut noop)
}

pub fn rqmc_observed(p: &GwiProblem, opts: &McOptions, obs: Observer) -> Result<ApproxResult> {
    let start = Instant::now();
    let (t, shift) = setup(p, opts.adaptive, true)?;
    let k = p.dim();
    let r = opts.n_replicates.max(2);
    let mut gens = (0..r)
        .map(|i| SobolGenerator::new(k, Some(sub_seed(opts.seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    let mut accs: Vec<LogMeanAcc> = (0..r).map(|_| shift.map_or_else(LogMeanAcc::new, LogMeanAcc::with_shift)).collect();
    let mut w = vec![0.0; k];
    let mut x = vec![0.0; k];
    let mut u = Vector::zeros(k);
    let mut have = 0usize;
    let mut next = opts.rqmc_start.max(1);
    let mut evals = 0u64;
    let target = opts.target_rse();
    let mut converged = false;
    loop {
        for (g, acc) in gens.iter_mut().zip(accs.iter_mut()) {
            for _ in have..next {
                g.next_into(&mut w);
                for (xi, wi) in x.iter_mut().zip(&w) {
                    *xi = norm_quantile(*wi);
                }
                let lr = t.log_ratio(p, &x, &mut u);
                obs(u.as_slice(), lr, 1.0);
                acc.push(lr);
            }
        }
        evals += ((next - have) * r) as u64;
        have = next;
        let logs: Vec<f64> = accs.iter().map(|a| a.log_mean()).collect();
        let (_, rse) = combine_log_replicates(&logs);
        if opts.rel_tol > 0.0 && rse <= target {
            converged = true;
            break;
        }
        next = 2 * have;
        if evals + ((next - have) * r) as u64 > opts.max_samples {
            break;
        }
    }
    let logs: Vec<f64> = accs.iter().map(|a| a.log_mean()).collect();
    let (lm, rse) = combine_log_replicates(&logs);
    let mut res = finish(lm, rse, evals, start, converged);
    res.elapsed = start.elapsed();
    Ok(res)
}
