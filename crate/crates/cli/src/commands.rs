use std::io::Write;
use std::path::Path;
use std::time::Instant;

use clap::Args;
use nalgebra::{DMatrix, DVector};

use probit_mlm::harness::{
    benchmark_instance, fit_over_seeds, ground_truth, load_csv, simulate as simulate_draws, summarize, CalibrationOptions,
    CovStructure, Dataset, FitOptions, GroundTruthOptions, GsmBasis, Schema, SimSpec,
};
use probit_mlm::models::{evaluate, Cluster, Cutpoints, Family, Method, MethodOptions, ModelParams};
use probit_mlm::mvn_cdf::{mvn_interval, CdfOptions, HyperRect};
use probit_mlm::sequences::{korobov_points, sobol_points, uniform_points};
use probit_mlm::{ApproxResult, Error, Result, Status};

use crate::settings::{io_err, parse_matrix, parse_num, parse_vec, Settings};

const ALL_METHODS: [&str; 6] = ["cdf", "laplace", "aghq", "spherical_radial", "importance", "rqmc"];

#[derive(Debug, Args, Clone)]
pub struct ParamArgs {
    /// Fixed effects, comma separated; the multinomial `B` column by column.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    /// Rows separated by `;`.
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<String>,
    /// Free cut points `γ₂, …` of the ordered model.
    #[arg(long)]
    cutpoints: Option<String>,
}

macro_rules! out {
    ($w:expr, $($arg:tt)*) => { writeln!($w, $($arg)*).map_err(io_err)? };
}

fn finish(mut w: Box<dyn Write>, code: u8) -> Result<u8> {
    w.flush().map_err(io_err)?;
    Ok(code)
}

fn method(s: &Settings, default: &str) -> Result<Method> {
    Method::parse(s.engine.as_deref().unwrap_or(default), s.nodes.unwrap_or(10))
}

fn method_options(s: &Settings) -> MethodOptions {
    let mut o = MethodOptions::default().with_seed(s.seed);
    if let Some(t) = s.rel_tol {
        o = o.with_rel_tol(t);
    }
    if let Some(m) = s.max_samples {
        o = o.with_max_samples(m);
    }
    o
}

fn status_code(r: &ApproxResult) -> u8 {
    u8::from(r.status == Status::MaxSamples) * 2
}

pub fn points(s: &Settings, kind: &str) -> Result<u8> {
    let dim = s.k.unwrap_or(2);
    let n = s.n.unwrap_or(256);
    let set = match kind {
        "sobol" => sobol_points(dim, n, None)?,
        "scrambled" => sobol_points(dim, n, Some(s.seed))?,
        "korobov" => korobov_points(n, dim, s.seed).points(),
        "uniform" => uniform_points(dim, n, s.seed),
        _ => return Err(Error::InvalidInput(format!("unknown point set '{kind}'"))),
    };
    let mut w = s.writer()?;
    let cols: Vec<String> = (1..=dim).map(|j| format!("u{j}")).collect();
    out!(w, "index\t{}", cols.join("\t"));
    for (i, p) in set.iter().enumerate() {
        let v: Vec<String> = p.iter().map(|x| x.to_string()).collect();
        out!(w, "{i}\t{}", v.join("\t"));
    }
    finish(w, 0)
}

/// Lines `lower …`, `upper …`, `mean …` and one `cov …` line per row;
/// `#` starts a comment. `lower` and `mean` default to `-inf` and zero.
fn read_cdf_problem(text: &str) -> Result<(HyperRect, DVector<f64>, DMatrix<f64>)> {
    let (mut lower, mut upper, mut mean, mut cov) = (None, None, None, Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(key) = it.next() else { continue };
        let vals: Vec<f64> = it.map(parse_num).collect::<Result<_>>()?;
        match key {
            "dim" => {}
            "lower" => lower = Some(vals),
            "upper" => upper = Some(vals),
            "mean" => mean = Some(vals),
            "cov" => cov.push(vals),
            _ => return Err(Error::Parse { row: i + 1, column: key.into(), message: "unknown key".into() }),
        }
    }
    let upper = upper.ok_or_else(|| Error::InvalidInput("problem has no upper line".into()))?;
    let k = upper.len();
    let lower = lower.unwrap_or_else(|| vec![f64::NEG_INFINITY; k]);
    let mean = mean.unwrap_or_else(|| vec![0.0; k]);
    if lower.len() != k || mean.len() != k || cov.len() != k || cov.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch(format!("problem of dimension {k} has mismatched rows")));
    }
    let rect = HyperRect::new(DVector::from_vec(lower), DVector::from_vec(upper))?;
    Ok((rect, DVector::from_vec(mean), DMatrix::from_fn(k, k, |i, j| cov[i][j])))
}

pub fn cdf(s: &Settings, problem: &Path, timing: bool) -> Result<u8> {
    let (rect, mean, cov) = read_cdf_problem(&std::fs::read_to_string(problem)?)?;
    let mut o = CdfOptions { seed: s.seed, ..CdfOptions::default() };
    if let Some(t) = s.rel_tol {
        o.rel_tol = t;
    }
    if let Some(m) = s.max_samples {
        o.max_samples = m;
    }
    let r = mvn_interval(&rect, &mean, &cov, &o)?;
    let mut w = s.writer()?;
    let t = if timing { "\ttime_s" } else { "" };
    out!(w, "estimate\tstd_error\tlog_estimate\tn_evals\tstatus{t}");
    let t = if timing { format!("\t{}", r.elapsed.as_secs_f64()) } else { String::new() };
    out!(w, "{}\t{}\t{}\t{}\t{}{t}", r.estimate, r.std_error, r.log_estimate, r.n_evals, r.status.as_str());
    finish(w, status_code(&r))
}

fn gsm_basis(s: &str) -> Result<GsmBasis> {
    Ok(match s {
        "log" => GsmBasis::Log,
        "linear" => GsmBasis::Linear,
        _ => match s.strip_prefix("ispline").and_then(|k| k.parse().ok()) {
            Some(k) => GsmBasis::ISpline(k),
            None => return Err(Error::InvalidInput(format!("unknown basis '{s}'"))),
        },
    })
}

fn load(s: &Settings, data: &Path, basis: Option<&str>) -> Result<Dataset> {
    let fam = s.family.as_deref().unwrap_or("binomial");
    let mut schema = Schema::parse(fam)?;
    if let (Schema::Gsm(_), Some(b)) = (schema, s.extra_str(basis, "basis")) {
        schema = Schema::Gsm(gsm_basis(&b)?);
    }
    load_csv(data, schema)
}

fn params(s: &Settings, a: &ParamArgs, first: &Cluster) -> Result<ModelParams> {
    let need = |v: Option<String>, what: &str| v.ok_or_else(|| Error::InvalidInput(format!("--{what} is required")));
    let beta = parse_vec(&need(s.extra_str(a.beta.as_deref(), "beta"), "beta")?)?;
    let sigma = parse_matrix(&need(s.extra_str(a.sigma.as_deref(), "sigma"), "sigma")?)?;
    let cut = match s.extra_str(a.cutpoints.as_deref(), "cutpoints") {
        Some(c) => Cutpoints::new(parse_vec(&c)?)?,
        None => match first {
            Cluster::Ordered(o) => Cutpoints::new((1..o.c - 1).map(|i| i as f64).collect())?,
            _ => Cutpoints::default(),
        },
    };
    Ok(ModelParams::new(DVector::from_vec(beta), sigma).with_cutpoints(cut))
}

fn first(d: &Dataset) -> Result<&Cluster> {
    d.clusters.first().ok_or_else(|| Error::InvalidInput("no clusters".into()))
}

pub fn gwi(s: &Settings, data: &Path, a: &ParamArgs, timing: bool) -> Result<u8> {
    let d = load(s, data, None)?;
    let p = params(s, a, first(&d)?)?;
    let m = method(s, "aghq")?;
    let o = method_options(s);
    let mut w = s.writer()?;
    let t = if timing { "\ttime_s" } else { "" };
    out!(w, "cluster_id\tmethod\tlog_lik\tlog_se\tn_evals\tstatus{t}");
    let mut code = 0;
    let (mut total, mut var) = (0.0, 0.0);
    for (id, c) in d.ids.iter().zip(&d.clusters) {
        let r = evaluate(&c.build(&p)?, m, &o)?;
        code = code.max(status_code(&r));
        total += r.log_estimate;
        var += r.rel_std_error.powi(2);
        let t = if timing { format!("\t{}", r.elapsed.as_secs_f64()) } else { String::new() };
        out!(w, "{id}\t{}\t{}\t{}\t{}\t{}{t}", m.name(), r.log_estimate, r.rel_std_error, r.n_evals, r.status.as_str());
    }
    let t = if timing { "\t" } else { "" };
    out!(w, "total\t{}\t{total}\t{}\t\t{t}", m.name(), var.sqrt());
    finish(w, code)
}

pub fn compare(s: &Settings, data: &Path, a: &ParamArgs, timing: bool) -> Result<u8> {
    let d = load(s, data, None)?;
    let p = params(s, a, first(&d)?)?;
    let o = method_options(s);
    let built: Vec<_> = d.clusters.iter().map(|c| c.build(&p)).collect::<Result<_>>()?;
    let mut w = s.writer()?;
    let t = if timing { "\ttime_s" } else { "" };
    out!(w, "method\tlog_lik\tlog_se\tn_evals\tstatus{t}");
    let mut code = 0;
    for name in ALL_METHODS {
        let m = Method::parse(name, s.nodes.unwrap_or(10))?;
        let start = Instant::now();
        let (mut total, mut var, mut evals, mut capped) = (0.0, 0.0, 0u64, false);
        for b in &built {
            let r = evaluate(b, m, &o)?;
            total += r.log_estimate;
            var += r.rel_std_error.powi(2);
            evals += r.n_evals;
            capped |= r.status == Status::MaxSamples;
        }
        code = code.max(u8::from(capped) * 2);
        let status = if capped { "max_samples" } else { "ok" };
        let t = if timing { format!("\t{}", start.elapsed().as_secs_f64()) } else { String::new() };
        out!(w, "{}\t{total}\t{}\t{evals}\t{status}{t}", m.name(), var.sqrt());
    }
    finish(w, code)
}

fn family(s: &Settings) -> Result<Family> {
    match s.family.as_deref().unwrap_or("binomial") {
        "salamander" => Ok(Family::Binomial),
        f => f.parse(),
    }
}

fn sim_spec(s: &Settings, reps: usize) -> Result<SimSpec> {
    let family = family(s)?;
    let n = s.n.unwrap_or(4);
    let c = s.c.unwrap_or(3);
    Ok(match family {
        Family::Multinomial => SimSpec::multinomial(n, c, reps, s.seed),
        f => SimSpec { family: f, n, k: s.k.unwrap_or(2), c, n_reps: reps, seed: s.seed },
    })
}

fn cols(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("{prefix}{j}")).collect()
}

fn row_str(m: &DMatrix<f64>, i: usize, skip: usize) -> Vec<String> {
    (skip..m.ncols()).map(|j| m[(i, j)].to_string()).collect()
}

pub fn simulate(s: &Settings, reps: Option<usize>, truth: Option<&Path>) -> Result<u8> {
    let reps = s.extra(reps, "reps")?.unwrap_or(10);
    let draws = simulate_draws(&sim_spec(s, reps)?)?;
    let mut w = s.writer()?;
    for (r, d) in draws.iter().enumerate() {
        match &d.cluster {
            Cluster::Binomial(b) => {
                if r == 0 {
                    out!(w, "cluster_id,y,m,{},{}", cols("x", b.x.ncols()).join(","), cols("z", b.z.ncols()).join(","));
                }
                for i in 0..b.y.len() {
                    out!(w, "{r},{},{},{},{}", b.y[i], b.m[i], row_str(&b.x, i, 0).join(","), row_str(&b.z, i, 0).join(","));
                }
            }
            Cluster::Ordered(b) => {
                if r == 0 {
                    out!(w, "cluster_id,y,{},{}", cols("x", b.x.ncols()).join(","), cols("z", b.z.ncols()).join(","));
                }
                for i in 0..b.y.len() {
                    out!(w, "{r},{},{},{}", b.y[i], row_str(&b.x, i, 0).join(","), row_str(&b.z, i, 0).join(","));
                }
            }
            Cluster::Multinomial(b) => {
                let k = b.z[0].ncols();
                if r == 0 {
                    let z: Vec<String> = (1..=b.c).flat_map(|j| (1..=k).map(move |kk| format!("z{j}_{kk}"))).collect();
                    out!(w, "cluster_id,y,{},{}", cols("x", b.x.ncols()).join(","), z.join(","));
                }
                for i in 0..b.y.len() {
                    let z: Vec<String> = b.z[i].transpose().iter().map(|v| v.to_string()).collect();
                    out!(w, "{r},{},{},{}", b.y[i], row_str(&b.x, i, 0).join(","), z.join(","));
                }
            }
            Cluster::Gsm(b) => {
                // the first design column is the log-time basis
                if r == 0 {
                    out!(w, "cluster_id,time,event,{},{}", cols("x", b.x.ncols() - 1).join(","), cols("z", b.z.ncols()).join(","));
                }
                for i in 0..b.time.len() {
                    let e = u8::from(b.event[i]);
                    out!(w, "{r},{},{e},{},{}", b.time[i], row_str(&b.x, i, 1).join(","), row_str(&b.z, i, 0).join(","));
                }
            }
        }
    }
    w.flush().map_err(io_err)?;
    if let Some(path) = truth {
        let mut t = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(t, "cluster_id\tparameter\tvalue").map_err(io_err)?;
        for (r, d) in draws.iter().enumerate() {
            for (j, b) in d.params.beta.iter().enumerate() {
                writeln!(t, "{r}\tbeta{}\t{b}", j + 1).map_err(io_err)?;
            }
            let k = d.params.sigma.nrows();
            for i in 0..k {
                for j in 0..=i {
                    writeln!(t, "{r}\tsigma{}_{}\t{}", i + 1, j + 1, d.params.sigma[(i, j)]).map_err(io_err)?;
                }
            }
            for (j, g) in d.params.cutpoints.free().iter().enumerate() {
                writeln!(t, "{r}\tgamma{}\t{g}", j + 2).map_err(io_err)?;
            }
        }
        t.flush().map_err(io_err)?;
    }
    Ok(0)
}

pub fn benchmark(
    s: &Settings,
    reps: Option<usize>,
    methods: Option<&str>,
    target: Option<f64>,
    paper_scale: bool,
    cells_out: Option<&Path>,
) -> Result<u8> {
    let reps = s.extra(reps, "reps")?.unwrap_or(10);
    let paper_scale = paper_scale || s.extra(None::<bool>, "paper-scale")?.unwrap_or(false);
    let mut cal = if paper_scale { CalibrationOptions::paper() } else { CalibrationOptions::desk() };
    let mut gt = if paper_scale { GroundTruthOptions::paper() } else { GroundTruthOptions::desk() };
    if family(s)? == Family::Multinomial {
        cal.target = if paper_scale { 5e-4 } else { 5e-3 };
    }
    if let Some(t) = s.extra(target, "target")? {
        cal.target = t;
    }
    if let Some(m) = s.max_samples {
        cal.max_samples = m;
    }
    cal.seed = s.seed;
    gt.seed = s.seed;
    let list = s.extra_str(methods, "methods").unwrap_or_else(|| ALL_METHODS.join(","));
    let nodes = s.nodes.unwrap_or(1);
    let methods: Vec<Method> = list.split(',').map(|m| Method::parse(m.trim(), nodes)).collect::<Result<_>>()?;
    // instances whose reference value misses its precision are replaced
    let draws = simulate_draws(&sim_spec(s, 3 * reps)?)?;
    let mut cells = Vec::with_capacity(reps);
    let mut resampled = 0;
    for d in &draws {
        if cells.len() == reps {
            break;
        }
        let b = d.cluster.build(&d.params)?;
        let truth = match ground_truth(&b, &gt) {
            Ok(t) => t.log_estimate,
            Err(Error::PrecisionNotReached { .. }) => {
                resampled += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        cells.push(benchmark_instance(&b, truth, &methods, &cal, 5)?);
    }
    if cells.len() < reps {
        return Err(Error::PrecisionNotReached { estimate: f64::NAN, std_error: f64::NAN, n_evals: resampled as u64 });
    }
    let mut w = s.writer()?;
    out!(w, "method\tmedian_ms\tmean_ms\tscaled_rmse\tfailures\tinstances");
    for r in summarize(&cells) {
        out!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.method,
            r.median_time.as_secs_f64() * 1e3,
            r.mean_time.as_secs_f64() * 1e3,
            r.rmse,
            r.failures,
            r.n_instances
        );
    }
    w.flush().map_err(io_err)?;
    if let Some(path) = cells_out {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "instance\tmethod\ttuning\tscaled_rmse\tmedian_ms\tmean_ms\treduced").map_err(io_err)?;
        for (i, row) in cells.iter().enumerate() {
            for c in row {
                let tuning = c.tuning.map_or("failed".to_string(), |t| t.describe());
                writeln!(
                    f,
                    "{i}\t{}\t{tuning}\t{}\t{}\t{}\t{}",
                    c.method,
                    c.rmse,
                    c.median_time.as_secs_f64() * 1e3,
                    c.mean_time.as_secs_f64() * 1e3,
                    c.reduced
                )
                .map_err(io_err)?;
            }
        }
        f.flush().map_err(io_err)?;
    }
    eprintln!("resampled {resampled} instances");
    Ok(0)
}

pub fn fit(s: &Settings, data: &Path, n_seeds: Option<usize>, basis: Option<&str>) -> Result<u8> {
    let d = load(s, data, basis)?;
    let first = first(&d)?;
    let k = first.random_dim();
    let cov = d.cov.clone().unwrap_or(CovStructure::Full(k));
    let m = method(s, "cdf")?;
    let mut fo = FitOptions::new(m, cov.clone());
    fo.seed = s.seed;
    fo.threads = s.threads;
    if let Some(t) = s.rel_tol {
        fo.fine_rel_tol = t;
        fo.coarse_rel_tol = fo.coarse_rel_tol.max(t);
    }
    if let Some(n) = s.max_samples {
        fo.max_samples = n;
    }
    if let Cluster::Gsm(g) = first {
        fo.positive_beta = (0..g.dx.ncols()).filter(|&j| g.dx.column(j).iter().any(|&v| v != 0.0)).collect();
    }
    let n_seeds = s.extra(n_seeds, "n-seeds")?.unwrap_or(10);
    let r = fit_over_seeds(&d.clusters, None, &fo, n_seeds)?;
    let est = r.estimates();
    let sd = r.se_over_seeds.clone();
    let nb = r.params.beta.len();
    let salamander = s.family.as_deref() == Some("salamander");
    let mut rows: Vec<(String, usize)> = (0..nb)
        .map(|j| {
            let name = if salamander { ["b0", "b_m", "b_f", "b_mf"][j].to_string() } else { format!("beta{}", j + 1) };
            (name, j)
        })
        .collect();
    match &cov {
        CovStructure::Full(k) => rows.extend((0..*k).map(|i| (format!("sd{}", i + 1), nb + i))),
        CovStructure::Grouped(g) => {
            for grp in 0..cov.n_params() {
                let i = g.iter().position(|&v| v == grp).expect("group present");
                let name = if salamander { ["sd_f", "sd_m"][grp].to_string() } else { format!("sd_group{}", grp + 1) };
                rows.push((name, nb + i));
            }
        }
    }
    let mut w = s.writer()?;
    out!(w, "parameter\testimate\tsd_over_seeds");
    for (name, j) in rows {
        let sdj = sd.as_ref().map_or(String::from("NA"), |v| v[j].to_string());
        out!(w, "{name}\t{}\t{sdj}", est[j]);
    }
    if let CovStructure::Full(k) = &cov {
        for i in 0..*k {
            for j in 0..i {
                let c = r.params.sigma[(i, j)] / (r.params.sigma[(i, i)] * r.params.sigma[(j, j)]).sqrt();
                out!(w, "corr{}_{}\t{c}\tNA", i + 1, j + 1);
            }
        }
    }
    for (j, g) in r.params.cutpoints.free().iter().enumerate() {
        out!(w, "gamma{}\t{g}\tNA", j + 2);
    }
    out!(w, "log_likelihood\t{}\tNA", r.log_likelihood);
    out!(w, "iterations\t{}\tNA", r.iterations);
    out!(w, "converged\t{}\tNA", r.converged);
    out!(w, "method\t{}\tNA", r.method);
    finish(w, 0)
}
