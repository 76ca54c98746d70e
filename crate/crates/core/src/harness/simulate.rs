use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::models::{
    BinomialCluster, Cluster, Cutpoints, Family, GsmCluster, LogTimeBasis, ModelParams, MultinomialCluster, OrderedCluster,
};
use crate::numeric::{cholesky, norm_cdf, Matrix, Vector};
use crate::sequences::{prng, sub_seed, Prng};

/// One simulation design: `n_reps` independent clusters of size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub family: Family,
    pub n: usize,
    pub k: usize,
    /// Categories, for the multinomial and ordered families.
    pub c: usize,
    pub n_reps: usize,
    pub seed: u64,
}

impl SimSpec {
    pub fn binomial(n: usize, k: usize, n_reps: usize, seed: u64) -> Self {
        Self { family: Family::Binomial, n, k, c: 2, n_reps, seed }
    }

    pub fn multinomial(n: usize, c: usize, n_reps: usize, seed: u64) -> Self {
        Self { family: Family::Multinomial, n, k: c, c, n_reps, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.n_reps == 0 {
            return Err(Error::InvalidInput(format!("n = {}, K = {}, reps = {}", self.n, self.k, self.n_reps)));
        }
        Ok(())
    }
}

/// A simulated cluster with the parameters and random effect it came from.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub cluster: Cluster,
    pub params: ModelParams,
    pub u: Vector,
}

fn std_normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

/// `W(scale·I, df)` as a sum of `df` outer products.
pub fn wishart(k: usize, df: usize, scale: f64, rng: &mut Prng) -> Matrix {
    let mut w = Matrix::zeros(k, k);
    let s = scale.sqrt();
    for _ in 0..df {
        let g = Vector::from_fn(k, |_, _| s * std_normal(rng));
        w.ger(1.0, &g, &g, 1.0);
    }
    w
}

/// `Σ ~ W(I/(5K), 5K)`, so `E Σ = I`.
pub fn draw_sigma(k: usize, rng: &mut Prng) -> Matrix {
    wishart(k, 5 * k, 1.0 / (5 * k) as f64, rng)
}

pub fn draw_effect(sigma: &Matrix, rng: &mut Prng) -> Result<Vector> {
    let l = cholesky(sigma)?;
    let e = Vector::from_fn(sigma.nrows(), |_, _| std_normal(rng));
    Ok(&l.lower * e)
}

/// `z_i = (1/K, z′)` with `z′ ~ N(0, I/K)`.
fn binomial_z(n: usize, k: usize, rng: &mut Prng) -> Matrix {
    let sd = (1.0 / k as f64).sqrt();
    Matrix::from_fn(n, k, |_, j| if j == 0 { 1.0 / k as f64 } else { sd * std_normal(rng) })
}

fn binomial_draw(n: usize, k: usize, rng: &mut Prng) -> Result<SimDraw> {
    let sigma = draw_sigma(k, rng);
    let u = draw_effect(&sigma, rng)?;
    let x = Matrix::from_fn(n, 1, |_, _| std_normal(rng));
    let z = binomial_z(n, k, rng);
    let zu = &z * &u;
    let y = (0..n).map(|i| u32::from(rng.random::<f64>() < norm_cdf(x[(i, 0)] + zu[i]))).collect();
    let cluster = Cluster::Binomial(BinomialCluster { y, m: vec![1; n], x, z });
    Ok(SimDraw { cluster, params: ModelParams::new(Vector::from_element(1, 1.0), sigma), u })
}

/// `η_i = B x_i ~ N(0, I)` with `B = I`, `Z_i = I`, and the category with the
/// largest latent `A_i ~ N(η_i + u, I)`.
fn multinomial_draw(n: usize, c: usize, rng: &mut Prng) -> Result<SimDraw> {
    let sigma = draw_sigma(c, rng);
    let u = draw_effect(&sigma, rng)?;
    let x = Matrix::from_fn(n, c, |_, _| std_normal(rng));
    let y = (0..n)
        .map(|i| {
            let a: Vec<f64> = (0..c).map(|k| x[(i, k)] + u[k] + std_normal(rng)).collect();
            1 + (0..c).fold(0, |best, k| if a[k] > a[best] { k } else { best })
        })
        .collect();
    let cluster = Cluster::Multinomial(MultinomialCluster { y, c, x, z: vec![Matrix::identity(c, c); n] });
    let b = Matrix::identity(c, c);
    Ok(SimDraw { cluster, params: ModelParams::new(Vector::from_column_slice(b.as_slice()), sigma), u })
}

/// Binomial clusters per the simulation design, one per replicate, each
/// from its own sub-seed.
pub fn simulate_binomial(spec: &SimSpec) -> Result<Vec<SimDraw>> {
    spec.validate()?;
    (0..spec.n_reps).map(|r| binomial_draw(spec.n, spec.k, &mut prng(sub_seed(spec.seed, r as u64)))).collect()
}

pub fn simulate_multinomial(spec: &SimSpec) -> Result<Vec<SimDraw>> {
    spec.validate()?;
    if spec.c < 2 {
        return Err(Error::InvalidInput(format!("{} categories", spec.c)));
    }
    (0..spec.n_reps).map(|r| multinomial_draw(spec.n, spec.c, &mut prng(sub_seed(spec.seed, r as u64)))).collect()
}

pub fn simulate(spec: &SimSpec) -> Result<Vec<SimDraw>> {
    match spec.family {
        Family::Binomial => simulate_binomial(spec),
        Family::Multinomial => simulate_multinomial(spec),
        f => (0..spec.n_reps)
            .map(|r| random_instance(f, spec.n, spec.k, spec.c, &mut prng(sub_seed(spec.seed, r as u64))))
            .collect(),
    }
}

/// A random cluster of any family, for cross-checks. Binomial and
/// multinomial clusters follow the simulation design; ordered clusters use
/// the binomial design with `c` categories, and GSM clusters a log-time
/// probit survival model with log-normal censoring.
pub fn random_instance(family: Family, n: usize, k: usize, c: usize, rng: &mut Prng) -> Result<SimDraw> {
    match family {
        Family::Binomial => binomial_draw(n, k, rng),
        Family::Multinomial => multinomial_draw(n, c, rng),
        Family::Ordered => {
            let sigma = draw_sigma(k, rng);
            let u = draw_effect(&sigma, rng)?;
            let x = Matrix::from_fn(n, 1, |_, _| std_normal(rng));
            let z = binomial_z(n, k, rng);
            let step = Uniform::new(0.3, 1.0).expect("valid range");
            let mut g = Vec::new();
            let mut acc = 0.0;
            for _ in 0..c.saturating_sub(2) {
                acc += step.sample(rng);
                g.push(acc);
            }
            let cut = Cutpoints::new(g)?;
            let zu = &z * &u;
            let y = (0..n)
                .map(|i| {
                    let a = x[(i, 0)] + zu[i] + std_normal(rng);
                    (1..=c).find(|&k| a <= cut.bound(k)).unwrap_or(c)
                })
                .collect();
            let params = ModelParams::new(Vector::from_element(1, 1.0), sigma).with_cutpoints(cut);
            Ok(SimDraw { cluster: Cluster::Ordered(OrderedCluster { y, c, x, z }), params, u })
        }
        Family::Gsm => {
            let sigma = draw_sigma(k, rng);
            let u = draw_effect(&sigma, rng)?;
            let cov = Matrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { std_normal(rng) });
            let z = binomial_z(n, k, rng);
            let beta = Vector::from_vec(vec![1.0 + rng.random::<f64>(), -0.2, 0.4]);
            let cens = LogNormal::new(0.5, 1.0).expect("valid parameters");
            let zu = &z * &u;
            let mut time = Vec::with_capacity(n);
            let mut event = Vec::with_capacity(n);
            for i in 0..n {
                let rest = beta[1] * cov[(i, 0)] + beta[2] * cov[(i, 1)] + zu[i];
                let t = ((std_normal(rng) - rest) / beta[0]).exp();
                let cc: f64 = cens.sample(rng);
                time.push(t.min(cc));
                event.push(t <= cc);
            }
            let cl = GsmCluster::from_basis(time, event, &cov, z, &LogTimeBasis)?;
            Ok(SimDraw { cluster: Cluster::Gsm(cl), params: ModelParams::new(beta, sigma), u })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wishart_mean_is_identity() {
        let mut rng = prng(5);
        let k = 3;
        let reps = 10_000;
        let mut sum = Matrix::zeros(k, k);
        let mut sq = Matrix::zeros(k, k);
        for _ in 0..reps {
            let s = draw_sigma(k, &mut rng);
            sum += &s;
            sq += s.component_mul(&s);
        }
        let mean = &sum / reps as f64;
        for i in 0..k {
            for j in 0..k {
                let var = sq[(i, j)] / reps as f64 - mean[(i, j)].powi(2);
                let se = (var / reps as f64).sqrt();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((mean[(i, j)] - want).abs() < 3.0 * se, "{i},{j}: {} ± {se}", mean[(i, j)]);
            }
        }
    }

    #[test]
    fn binomial_design() {
        let draws = simulate_binomial(&SimSpec::binomial(5, 3, 2, 1)).unwrap();
        let Cluster::Binomial(cl) = &draws[0].cluster else { panic!() };
        assert!(cl.z.column(0).iter().all(|&v| v == 1.0 / 3.0));
        let again = simulate_binomial(&SimSpec::binomial(5, 3, 2, 1)).unwrap();
        assert_eq!(draws[1].cluster, again[1].cluster);
    }
}
