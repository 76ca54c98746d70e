use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use probit_mlm::harness::Config;
use probit_mlm::{Error, Result};

use crate::Common;

/// Flags merged over the config file.
#[derive(Debug, Clone)]
pub struct Settings {
    pub config: Config,
    pub family: Option<String>,
    pub engine: Option<String>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub c: Option<usize>,
    pub seed: u64,
    pub rel_tol: Option<f64>,
    pub max_samples: Option<u64>,
    pub nodes: Option<usize>,
    pub threads: usize,
    pub out: Option<PathBuf>,
}

impl Settings {
    pub fn resolve(c: &Common) -> Result<Self> {
        let config = match &c.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        Ok(Self {
            family: c.family.clone().or_else(|| config.get("family").map(String::from)),
            engine: c.engine.clone().or_else(|| config.get("engine").map(String::from)),
            n: pick(c.n, &config, "n")?,
            k: pick(c.k, &config, "K")?,
            c: pick(c.c, &config, "c")?,
            seed: pick(c.seed, &config, "seed")?.unwrap_or(1),
            rel_tol: pick(c.rel_tol, &config, "rel-tol")?,
            max_samples: pick(c.max_samples, &config, "max-samples")?,
            nodes: pick(c.nodes, &config, "nodes")?,
            threads: pick(c.threads, &config, "threads")?.unwrap_or(1),
            out: c.out.clone().or_else(|| config.get("out").map(PathBuf::from)),
            config,
        })
    }

    /// A value that is not a shared flag, from the command line or config.
    pub fn extra<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        pick(flag, &self.config, key)
    }

    pub fn extra_str(&self, flag: Option<&str>, key: &str) -> Option<String> {
        flag.map(String::from).or_else(|| self.config.get(key).map(String::from))
    }

    pub fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

fn pick<T: std::str::FromStr>(flag: Option<T>, config: &Config, key: &str) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => config.get_parsed(key),
    }
}

pub fn parse_vec(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse_num(t.trim()))
        .collect()
}

/// Accepts `inf` and `-inf` as well as plain numbers.
pub fn parse_num(t: &str) -> Result<f64> {
    match t {
        "inf" | "+inf" | "Inf" => Ok(f64::INFINITY),
        "-inf" | "-Inf" => Ok(f64::NEG_INFINITY),
        _ => t.parse().map_err(|_| Error::InvalidInput(format!("'{t}' is not a number"))),
    }
}

/// Rows separated by `;`, entries by `,`.
pub fn parse_matrix(s: &str) -> Result<nalgebra::DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = s.split(';').map(parse_vec).collect::<Result<_>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::InvalidInput("ragged matrix".into()));
    }
    let m = rows[0].len();
    Ok(nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn io_err(e: io::Error) -> Error {
    Error::Io(e.to_string())
}
