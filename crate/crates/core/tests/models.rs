use probit_mlm::gwi::{Engine, McOptions};
use probit_mlm::harness::random_instance;
use probit_mlm::models::{
    build_binomial, build_gsm, build_multinomial, build_ordered, loglik_gradient, BinomialCluster, Cluster, Cutpoints, Family,
    GradPath, GsmCluster, LinearTimeBasis, ModelParams, MultinomialCluster, OrderedCluster,
};
use probit_mlm::mvn_cdf::{mvn_cdf, CdfOptions, HyperRect};
use probit_mlm::numeric::{cholesky, norm_cdf, norm_log_cdf, norm_log_pdf, Matrix, Vector};
use probit_mlm::sequences::prng;

fn m1(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

fn cdf_opts() -> CdfOptions {
    CdfOptions { rel_tol: 2e-4, max_samples: 2_000_000, ..CdfOptions::default() }
}

#[test]
fn tiny_random_effect_gives_product() {
    let x = Matrix::from_row_slice(3, 1, &[0.4, -0.3, 1.1]);
    let z = Matrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, -0.5, 1.0, 0.9]);
    let cl = BinomialCluster { y: vec![1, 0, 2], m: vec![1, 2, 3], x: x.clone(), z };
    let beta = Vector::from_vec(vec![0.8]);
    let b = build_binomial(&cl, &beta, &(Matrix::identity(2, 2) * 1e-10)).unwrap();
    let mut want = b.log_c;
    for (i, (&y, &m)) in cl.y.iter().zip(&cl.m).enumerate() {
        let e = x[(i, 0)] * 0.8;
        want += y as f64 * norm_log_cdf(e) + (m - y) as f64 * norm_log_cdf(-e);
    }
    let g = b.log_marginal_gwi(Engine::Aghq(10), &McOptions::default()).unwrap();
    assert!((g.log_estimate - want).abs() < 1e-6);
    let c = b.log_marginal_cdf(&cdf_opts()).unwrap();
    assert!((c.log_estimate - want).abs() < 1e-4 * want.abs());
}

#[test]
fn ordered_two_categories_is_binomial() {
    let mut rng = prng(11);
    for _ in 0..100 {
        let d = random_instance(Family::Binomial, 4, 2, 2, &mut rng).unwrap();
        let Cluster::Binomial(cl) = &d.cluster else { unreachable!() };
        let ord = OrderedCluster { y: cl.y.iter().map(|&y| y as usize + 1).collect(), c: 2, x: cl.x.clone(), z: cl.z.clone() };
        let a = build_binomial(cl, &d.params.beta, &d.params.sigma).unwrap();
        let b = build_ordered(&ord, &d.params.beta, &Cutpoints::default(), &d.params.sigma).unwrap();
        for e in [Engine::Aghq(12), Engine::Laplace] {
            let la = a.log_marginal_gwi(e, &McOptions::default()).unwrap().log_estimate;
            let lb = b.log_marginal_gwi(e, &McOptions::default()).unwrap().log_estimate;
            assert!((la - lb).abs() < 1e-12, "{la} {lb}");
        }
    }
}

#[test]
fn multinomial_two_categories_is_scaled_probit() {
    // P(Y = 1 | u) = Φ(((β₁ − β₂)ᵀx + (z₁ − z₂)ᵀu)/√2); integrating u ~ N(0, σ²)
    let x = Matrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let z = vec![Matrix::from_row_slice(2, 1, &[1.0, 0.0])];
    let cl = MultinomialCluster { y: vec![1], c: 2, x, z };
    let b = Matrix::from_row_slice(2, 2, &[0.3, -0.1, 0.6, 0.2]);
    let built = build_multinomial(&cl, &b, &m1(0.5)).unwrap();
    let eta = (0.3 + 0.1) + 0.5 * (0.6 - 0.2);
    let want = norm_cdf(eta / (2.0f64 + 0.5).sqrt()).ln();
    let c = built.log_marginal_cdf(&CdfOptions::default()).unwrap();
    assert!((c.log_estimate - want).abs() < 1e-12);
    let g = built.log_marginal_gwi(Engine::Aghq(20), &McOptions::default()).unwrap();
    assert!((g.log_estimate - want).abs() < 1e-6);
}

#[test]
fn gsm_without_censoring_is_closed_form() {
    let mut rng = prng(4);
    for _ in 0..20 {
        let d = random_instance(Family::Gsm, 4, 2, 2, &mut rng).unwrap();
        let Cluster::Gsm(mut cl) = d.cluster else { unreachable!() };
        cl.event = vec![true; 4];
        let b = build_gsm(&cl, &d.params.beta, &d.params.sigma).unwrap();
        assert_eq!(b.k2(), 0);
        for e in [Engine::Laplace, Engine::Importance, Engine::Aghq(3)] {
            let g = b.log_marginal_gwi(e, &McOptions::default()).unwrap();
            assert!((g.log_estimate - b.log_c).abs() < 1e-10);
        }
        // the β gradient of log k against central differences
        let cluster = Cluster::Gsm(cl.clone());
        let g = loglik_gradient(&cluster, &d.params, &GradPath::Cdf(CdfOptions::default())).unwrap();
        for j in 0..3 {
            let mut p = d.params.clone();
            p.beta[j] += 1e-6;
            let up = build_gsm(&cl, &p.beta, &p.sigma).unwrap().log_c;
            p.beta[j] -= 2e-6;
            let dn = build_gsm(&cl, &p.beta, &p.sigma).unwrap().log_c;
            let fd = (up - dn) / 2e-6;
            assert!((fd - g.d_beta[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} {}", g.d_beta[j]);
        }
    }
}

#[test]
fn gsm_all_censored_has_prior_weight() {
    let mut rng = prng(6);
    let d = random_instance(Family::Gsm, 3, 2, 2, &mut rng).unwrap();
    let Cluster::Gsm(mut cl) = d.cluster else { unreachable!() };
    cl.event = vec![false; 3];
    let b = build_gsm(&cl, &d.params.beta, &d.params.sigma).unwrap();
    assert!(b.log_c.abs() < 1e-12);
    assert!(b.gwi.xi1.iter().all(|&v| v == 0.0));
    assert!((&b.gwi.xi11 - &d.params.sigma).amax() < 1e-12);
}

/// Mixed Tobit: `T_i = m_i + (ε_i − z_iᵀu)/a`. The likelihood is the
/// density of the observed times times the conditional probability that
/// the censored ones exceed their censoring times.
#[test]
fn gsm_matches_tobit_oracle() {
    let a = 1.7;
    let beta = Vector::from_vec(vec![a, 0.3, -0.6]);
    let cov = Matrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 0.2]);
    let z = Matrix::from_row_slice(3, 2, &[1.0, 0.3, 1.0, -0.4, 1.0, 0.8]);
    let sigma = Matrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.3]);
    let time = vec![0.4, 0.1, 0.7];
    for event in [vec![true, false, true], vec![true, false, false], vec![false, true, true]] {
        let cl = GsmCluster::from_basis(time.clone(), event.clone(), &cov, z.clone(), &LinearTimeBasis).unwrap();
        let b = build_gsm(&cl, &beta, &sigma).unwrap();

        let mean = Vector::from_fn(3, |i, _| -(beta[1] * cov[(i, 0)] + beta[2] * cov[(i, 1)]) / a);
        let v = (Matrix::identity(3, 3) + &z * &sigma * z.transpose()) / (a * a);
        let o: Vec<usize> = (0..3).filter(|&i| event[i]).collect();
        let c: Vec<usize> = (0..3).filter(|&i| !event[i]).collect();
        let t = Vector::from_vec(time.clone());
        let voo = v.select_rows(&o).select_columns(&o);
        let vco = v.select_rows(&c).select_columns(&o);
        let vcc = v.select_rows(&c).select_columns(&c);
        let ro = t.select_rows(&o) - mean.select_rows(&o);
        let lo = cholesky(&voo).unwrap();
        let log_dens = -0.5 * lo.quad_form(&ro) - 0.5 * lo.log_det() + o.len() as f64 * norm_log_pdf(0.0);
        let cm = mean.select_rows(&c) + &vco * lo.solve(&ro);
        let cv = &vcc - &vco * lo.solve_mat(&vco.transpose());
        // P(T_c > t_c) = P(−T_c < −t_c)
        let rect = HyperRect::orthant(-t.select_rows(&c));
        let p = mvn_cdf(&rect, &-cm, &cv, &CdfOptions::default()).unwrap();
        let want = log_dens + p.log_estimate;

        let g = b.log_marginal_gwi(Engine::Aghq(20), &McOptions::default()).unwrap();
        assert!((g.log_estimate - want).abs() < 1e-8, "{} {want}", g.log_estimate);
        let cdf = b.log_marginal_cdf(&CdfOptions::default()).unwrap();
        assert!((cdf.log_estimate - want).abs() < 1e-8);
    }
}

#[test]
fn monotonicity_is_checked() {
    let cov = Matrix::from_row_slice(1, 1, &[1.0]);
    let cl = GsmCluster::from_basis(vec![1.0], vec![true], &cov, m1(1.0), &LinearTimeBasis).unwrap();
    let err = build_gsm(&cl, &Vector::from_vec(vec![-0.5, 0.1]), &m1(1.0)).unwrap_err();
    assert!(matches!(err, probit_mlm::Error::MonotonicityViolation { row: 0, .. }));
}

/// CDF and GWI forms agree for every family on random instances.
#[test]
fn representations_agree() {
    let mut rng = prng(21);
    let mc = McOptions { rel_tol: 1e-3, max_samples: 1_000_000, ..McOptions::default() };
    let cdf = CdfOptions { rel_tol: 1e-3, ..CdfOptions::default() };
    for family in [Family::Binomial, Family::Multinomial, Family::Ordered, Family::Gsm] {
        for r in 0..6 {
            let (n, k, c) = (2 + r % 4, 1 + r % 3, 3);
            let d = random_instance(family, n, k, c, &mut rng).unwrap();
            let b = d.cluster.build(&d.params).unwrap();
            let cdf = b.log_marginal_cdf(&cdf).unwrap();
            let gwi = b.log_marginal_gwi(Engine::SphericalRadial, &mc).unwrap();
            let se = (cdf.rel_std_error.powi(2) + gwi.rel_std_error.powi(2)).sqrt();
            // the multinomial integrand carries a small deterministic bias
            let slack = if family == Family::Multinomial { 1e-4 * n as f64 } else { 0.0 };
            assert!(
                (cdf.log_estimate - gwi.log_estimate).abs() <= 4.0 * se + slack + 1e-12,
                "{family} {r}: {} vs {} (se {se})",
                cdf.log_estimate,
                gwi.log_estimate
            );
        }
    }
}

fn fd_check(cluster: &Cluster, params: &ModelParams, path: &GradPath, h: f64, tol: f64) {
    let g = loglik_gradient(cluster, params, path).unwrap();
    let f = |p: &ModelParams| loglik_gradient(cluster, p, path).unwrap().value.log_estimate;
    let close = |fd: f64, an: f64, what: &str| {
        assert!((fd - an).abs() <= tol * fd.abs().max(1e-2), "{what}: fd {fd} vs {an}");
    };
    for j in 0..params.beta.len() {
        let mut p = params.clone();
        p.beta[j] += h;
        let up = f(&p);
        p.beta[j] -= 2.0 * h;
        close((up - f(&p)) / (2.0 * h), g.d_beta[j], &format!("beta {j}"));
    }
    let k = params.sigma.nrows();
    for i in 0..k {
        for j in 0..=i {
            let mut p = params.clone();
            p.sigma[(i, j)] += h;
            if i != j {
                p.sigma[(j, i)] += h;
            }
            let up = f(&p);
            p.sigma[(i, j)] -= 2.0 * h;
            if i != j {
                p.sigma[(j, i)] -= 2.0 * h;
            }
            let fd = (up - f(&p)) / (2.0 * h);
            let an = if i == j { g.d_sigma[(i, i)] } else { 2.0 * g.d_sigma[(i, j)] };
            close(fd, an, &format!("sigma {i}{j}"));
        }
    }
    for j in 0..params.cutpoints.free().len() {
        let mut free = params.cutpoints.free().to_vec();
        free[j] += h;
        let up = f(&params.clone().with_cutpoints(Cutpoints::new(free.clone()).unwrap()));
        free[j] -= 2.0 * h;
        let dn = f(&params.clone().with_cutpoints(Cutpoints::new(free).unwrap()));
        close((up - dn) / (2.0 * h), g.d_cutpoints[j], &format!("cut {j}"));
    }
    assert!((&g.d_sigma - g.d_sigma.transpose()).amax() < 1e-10);
}

#[test]
fn cdf_gradients_match_differences() {
    let mut rng = prng(8);
    let path = GradPath::Cdf(CdfOptions::fixed(40_000, 3));
    for family in [Family::Binomial, Family::Multinomial, Family::Ordered, Family::Gsm] {
        for _ in 0..3 {
            let d = random_instance(family, 4, 2, 3, &mut rng).unwrap();
            fd_check(&d.cluster, &d.params, &path, 1e-4, 1e-3);
        }
    }
}

#[test]
fn quadrature_gradients_match_differences() {
    let mut rng = prng(9);
    let path = GradPath::Gwi { engine: Engine::Aghq(20), opts: McOptions::default() };
    for family in [Family::Binomial, Family::Ordered, Family::Gsm, Family::Multinomial] {
        for _ in 0..2 {
            let d = random_instance(family, 4, 2, 3, &mut rng).unwrap();
            let k = if family == Family::Multinomial { 3 } else { 2 };
            assert_eq!(d.params.sigma.nrows(), k);
            let path = if family == Family::Multinomial { GradPath::Gwi { engine: Engine::Aghq(12), opts: McOptions::default() } } else { path.clone() };
            fd_check(&d.cluster, &d.params, &path, 1e-4, 1e-3);
        }
    }
}

#[test]
fn sampling_gradient_is_close() {
    let mut rng = prng(10);
    let d = random_instance(Family::Binomial, 5, 2, 2, &mut rng).unwrap();
    let exact = loglik_gradient(&d.cluster, &d.params, &GradPath::Gwi { engine: Engine::Aghq(25), opts: McOptions::default() }).unwrap();
    for engine in [Engine::Importance, Engine::SphericalRadial, Engine::Rqmc] {
        let opts = McOptions { rel_tol: 1e-4, ..McOptions::default() };
        let g = loglik_gradient(&d.cluster, &d.params, &GradPath::Gwi { engine, opts }).unwrap();
        let err = (&g.d_beta - &exact.d_beta).amax().max((&g.d_sigma - &exact.d_sigma).amax());
        assert!(err < 5e-3, "{}: {err}", engine.name());
    }
}
