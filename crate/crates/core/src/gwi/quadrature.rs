use nalgebra::SymmetricEigen;

use super::{find_mode, GwiProblem, Transform};
use crate::error::{Error, Result};
use crate::estimate::LogMeanAcc;
use crate::numeric::{Matrix, Vector};

pub const MAX_NODES: usize = 60;
pub const DEFAULT_NODE_BUDGET: f64 = 1e7;

/// Gauss-Hermite rule for `∫ φ(x) f(x) dx ≈ Σ w_i f(x_i)`, nodes ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal Hermite values `(He_b(x)/√b!, He_{b−1}(x)/√(b−1)!)`.
fn hermite_pair(b: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (0.0, 1.0);
    for n in 1..=b {
        let p2 = (x * p1 - ((n - 1) as f64).sqrt() * p0) / (n as f64).sqrt();
        p0 = p1;
        p1 = p2;
    }
    (p1, p0)
}

/// Golub-Welsch eigenvalues of the Jacobi matrix, polished by Newton steps
/// on the Hermite polynomial; weights from the Christoffel formula
/// `w_i = 1/(b·h_{b−1}(x_i)²)` so small weights keep relative accuracy.
pub fn ghq_rule(b: usize) -> Result<QuadratureRule> {
    if b == 0 || b > MAX_NODES {
        return Err(Error::InvalidInput(format!("node count {b} outside 1..={MAX_NODES}")));
    }
    let mut jac = Matrix::zeros(b, b);
    for i in 1..b {
        let v = (i as f64).sqrt();
        jac[(i, i - 1)] = v;
        jac[(i - 1, i)] = v;
    }
    let eig = SymmetricEigen::new(jac);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite nodes"));
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, q) = hermite_pair(b, *x);
            let dp = (b as f64).sqrt() * q;
            if dp == 0.0 {
                break;
            }
            *x -= p / dp;
        }
    }
    // exact symmetry about zero
    for i in 0..b / 2 {
        let m = 0.5 * (nodes[b - 1 - i] - nodes[i]);
        nodes[i] = -m;
        nodes[b - 1 - i] = m;
    }
    if b % 2 == 1 {
        nodes[b / 2] = 0.0;
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (_, q) = hermite_pair(b, x);
            1.0 / (b as f64 * q * q)
        })
        .collect();
    let tot: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= tot);
    Ok(QuadratureRule { nodes, weights })
}

/// `log Σ_nodes Π_j w_{i_j} · exp(f(x))` over the tensor grid, visiting
/// points in odometer order with the first coordinate fastest.
/// `f` receives the point and the log of its product weight.
pub fn tensor_log_sum(rule: &QuadratureRule, dim: usize, budget: f64, mut f: impl FnMut(&[f64], f64) -> f64) -> Result<f64> {
    let b = rule.nodes.len();
    let needed = (b as f64).powi(dim as i32);
    if needed > budget {
        return Err(Error::NodeBudgetExceeded { needed, budget });
    }
    let log_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
    let mut idx = vec![0usize; dim];
    let mut x: Vec<f64> = vec![rule.nodes[0]; dim];
    let mut acc = LogMeanAcc::new();
    loop {
        let lw: f64 = idx.iter().map(|&i| log_w[i]).sum();
        acc.push(lw + f(&x, lw));
        let mut d = 0;
        loop {
            if d == dim {
                let n = acc.count() as f64;
                return Ok(acc.log_mean() + n.ln());
            }
            idx[d] += 1;
            if idx[d] < b {
                x[d] = rule.nodes[idx[d]];
                break;
            }
            idx[d] = 0;
            x[d] = rule.nodes[0];
            d += 1;
        }
    }
}

fn tensor(p: &GwiProblem, t: &Transform, b: usize, budget: f64, obs: Option<&mut dyn FnMut(&[f64], f64, f64)>) -> Result<f64> {
    let rule = ghq_rule(b)?;
    let mut u = Vector::zeros(p.dim());
    match obs {
        None => tensor_log_sum(&rule, p.dim(), budget, |x, _| t.log_ratio(p, x, &mut u)),
        Some(obs) => tensor_log_sum(&rule, p.dim(), budget, |x, lw| {
            let lr = t.log_ratio(p, x, &mut u);
            obs(u.as_slice(), lr, lw.exp());
            lr
        }),
    }
}

/// Gauss-Hermite product rule centred and scaled by the Gaussian weight.
pub fn ghq(p: &GwiProblem, b: usize) -> Result<f64> {
    tensor(p, &Transform::prior(p), b, DEFAULT_NODE_BUDGET, None)
}

/// Gauss-Hermite product rule centred at the mode and scaled by the
/// inverse negative Hessian of `log g`.
pub fn aghq(p: &GwiProblem, b: usize) -> Result<f64> {
    let m = find_mode(p)?;
    tensor(p, &Transform::adaptive(&m), b, DEFAULT_NODE_BUDGET, None)
}

/// `aghq` that also reports each node `(u, log ratio, weight)`.
pub fn aghq_observed(p: &GwiProblem, b: usize, budget: f64, obs: &mut dyn FnMut(&[f64], f64, f64)) -> Result<f64> {
    let m = find_mode(p)?;
    tensor(p, &Transform::adaptive(&m), b, budget, Some(obs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_odd(n: u32) -> f64 {
        (1..=n).step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn small_rules() {
        let r = ghq_rule(1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![1.0]);
        let r = ghq_rule(2).unwrap();
        assert!((r.nodes[0] + 1.0).abs() < 1e-15 && (r.nodes[1] - 1.0).abs() < 1e-15);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ten_point_eighth_moment() {
        let r = ghq_rule(10).unwrap();
        let m: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(8)).sum();
        assert!((m - 105.0).abs() < 1e-12 * 105.0);
    }

    #[test]
    fn degree_exactness() {
        for b in 1..=20 {
            let r = ghq_rule(b).unwrap();
            for d in 0..2 * b {
                let m: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(d as i32)).sum();
                let want = if d % 2 == 1 { 0.0 } else { double_factorial_odd(d as u32) };
                // size of the even moment at or above d
                let scale = double_factorial_odd(2 * d.div_ceil(2) as u32);
                assert!((m - want).abs() <= 1e-11 * scale, "b={b} d={d}: {m} vs {want}");
            }
        }
    }

    #[test]
    fn budget_enforced() {
        let r = ghq_rule(10).unwrap();
        assert!(matches!(tensor_log_sum(&r, 8, 1e7, |_, _| 0.0), Err(Error::NodeBudgetExceeded { .. })));
    }
}
