//! `probit-mlm`: point sets, MVN CDFs, cluster log-likelihoods, simulation,
//! benchmarking and ML fits from the command line. Every command writes a
//! TSV table to `--out` or stdout.
//!
//! Exit status is 0 on success, 2 when a precision target was not reached,
//! and 1 for bad input.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probit_mlm::Error;

#[derive(Debug, Parser)]
#[command(name = "probit-mlm", version, about = "Log marginal likelihoods of probit mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

/// Flags shared by all commands. Any of them may also come from the
/// `--config` file; flags win.
#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    #[arg(long, global = true)]
    pub family: Option<String>,
    /// cdf, laplace, importance, spherical_radial, rqmc, ghq or aghq.
    #[arg(long, global = true)]
    pub engine: Option<String>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long = "K", global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub c: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub rel_tol: Option<f64>,
    #[arg(long, global = true)]
    pub max_samples: Option<u64>,
    /// Quadrature nodes per dimension.
    #[arg(long, global = true)]
    pub nodes: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump a point set, one point per row.
    Points {
        /// sobol, scrambled, korobov or uniform.
        #[arg(default_value = "sobol")]
        kind: String,
    },
    /// MVN rectangle probability of a problem file.
    Cdf {
        problem: PathBuf,
        /// Add the elapsed time column.
        #[arg(long)]
        timing: bool,
    },
    /// Per-cluster log-likelihoods of a data set at given parameters.
    Gwi {
        data: PathBuf,
        #[command(flatten)]
        params: commands::ParamArgs,
        #[arg(long)]
        timing: bool,
    },
    /// Simulated clusters as a CSV in the data schema.
    Simulate {
        #[arg(long)]
        reps: Option<usize>,
        /// Also write the true parameters here.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Calibrate every method to a target scaled RMSE and time it.
    Benchmark {
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated methods; all by default.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        target: Option<f64>,
        /// The original sample budgets instead of the reduced defaults.
        #[arg(long)]
        paper_scale: bool,
        /// Per-instance cells go here.
        #[arg(long)]
        cells: Option<PathBuf>,
    },
    /// Maximum likelihood fit.
    Fit {
        data: PathBuf,
        /// Refits with other seeds to report the Monte Carlo spread.
        #[arg(long)]
        n_seeds: Option<usize>,
        /// GSM time basis: log, linear or ispline<k> with k interior knots.
        #[arg(long)]
        basis: Option<String>,
    },
    /// Every method on the same data and parameters.
    Compare {
        data: PathBuf,
        #[command(flatten)]
        params: commands::ParamArgs,
        #[arg(long)]
        timing: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::PrecisionNotReached { .. } | Error::CannotReachTarget { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = settings::Settings::resolve(&cli.common).and_then(|s| match cli.command {
        Command::Points { kind } => commands::points(&s, &kind),
        Command::Cdf { problem, timing } => commands::cdf(&s, &problem, timing),
        Command::Gwi { data, params, timing } => commands::gwi(&s, &data, &params, timing),
        Command::Simulate { reps, truth } => commands::simulate(&s, reps, truth.as_deref()),
        Command::Benchmark { reps, methods, target, paper_scale, cells } => {
            commands::benchmark(&s, reps, methods.as_deref(), target, paper_scale, cells.as_deref())
        }
        Command::Fit { data, n_seeds, basis } => commands::fit(&s, &data, n_seeds, basis.as_deref()),
        Command::Compare { data, params, timing } => commands::compare(&s, &data, &params, timing),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("probit-mlm: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
