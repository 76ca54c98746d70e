//! CSV input. Every file has a `cluster_id` column; rows are grouped by it
//! in order of first appearance.
//!
//! | schema        | columns                                                   |
//! |---------------|-----------------------------------------------------------|
//! | `binomial`    | `cluster_id, y, m, x1..xp, z1..zK`                        |
//! | `ordered`     | `cluster_id, y, x1..xp, z1..zK` (`y` in `1..=c`)          |
//! | `multinomial` | `cluster_id, y, x1..xp, z{j}_{k}` for category `j`, `k ≤ K` |
//! | `gsm`         | `cluster_id, time, event, x1..xp, z1..zK`                 |
//! | `salamander`  | `cluster_id, y, wsm, wsf, male_id, female_id`             |
//!
//! GSM `x` columns are time-fixed covariates; the time basis comes first in
//! the design. Salamander rows get `x = (1, wsm, wsf, wsm·wsf)` and `z`
//! one-hot over the cluster's females, then its males.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::fit::CovStructure;
use crate::error::{Error, Result};
use crate::models::{
    BinomialCluster, Cluster, GsmCluster, ISplineBasis, LinearTimeBasis, LogTimeBasis, MultinomialCluster, OrderedCluster, TimeBasis,
};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GsmBasis {
    Linear,
    Log,
    /// I-splines in log time with this many interior knots.
    ISpline(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schema {
    Binomial,
    Ordered,
    Multinomial,
    Gsm(GsmBasis),
    Salamander,
}

impl Schema {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "binomial" => Schema::Binomial,
            "ordered" => Schema::Ordered,
            "multinomial" => Schema::Multinomial,
            "gsm" => Schema::Gsm(GsmBasis::Log),
            "salamander" => Schema::Salamander,
            _ => return Err(Error::InvalidInput(format!("unknown schema '{s}'"))),
        })
    }
}

/// Parsed clusters with their ids and, for the salamander layout, the
/// covariance structure of the crossed design.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub clusters: Vec<Cluster>,
    pub cov: Option<CovStructure>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::SchemaMismatch(format!("missing column '{name}'")))
    }

    /// `prefix1, prefix2, …` up to the first gap.
    fn numbered(&self, prefix: &str) -> Vec<usize> {
        (1..).map_while(|j| self.col(&format!("{prefix}{j}")).ok()).collect()
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let s = self.rows[row][col].trim();
        s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
            row: row + 2,
            column: self.header[col].clone(),
            message: format!("'{s}' is not a finite number"),
        })
    }

    fn int(&self, row: usize, col: usize) -> Result<u64> {
        let s = self.rows[row][col].trim();
        s.parse::<u64>().map_err(|_| Error::Parse {
            row: row + 2,
            column: self.header[col].clone(),
            message: format!("'{s}' is not a non-negative integer"),
        })
    }

    /// Row indices per cluster, in order of first appearance.
    fn groups(&self) -> Result<(Vec<String>, Vec<Vec<usize>>)> {
        let c = self.col("cluster_id")?;
        let mut ids = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut at = HashMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let id = r[c].trim().to_string();
            let g = *at.entry(id.clone()).or_insert_with(|| {
                ids.push(id);
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        Ok((ids, groups))
    }

    fn matrix(&self, rows: &[usize], cols: &[usize]) -> Result<Matrix> {
        let mut m = Matrix::zeros(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                m[(i, j)] = self.num(r, c)?;
            }
        }
        Ok(m)
    }
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(|e| Error::SchemaMismatch(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 2, column: String::new(), message: e.to_string() })?;
        rows.push(rec.iter().map(String::from).collect());
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("no data rows".into()));
    }
    Ok(Table { header, rows })
}

fn need(cols: Vec<usize>, what: &str) -> Result<Vec<usize>> {
    if cols.is_empty() {
        return Err(Error::SchemaMismatch(format!("no {what}1 column")));
    }
    Ok(cols)
}

pub fn load_csv(path: impl AsRef<Path>, schema: Schema) -> Result<Dataset> {
    let f = std::fs::File::open(path.as_ref())?;
    read_csv(f, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: Schema) -> Result<Dataset> {
    let t = read_table(reader)?;
    let (ids, groups) = t.groups()?;
    if schema == Schema::Salamander {
        return salamander(&t, ids, &groups);
    }
    let xc = need(t.numbered("x"), "x")?;
    let mut clusters = Vec::with_capacity(groups.len());
    match schema {
        Schema::Binomial => {
            let (yc, mc, zc) = (t.col("y")?, t.col("m")?, need(t.numbered("z"), "z")?);
            for g in &groups {
                let mut y = Vec::with_capacity(g.len());
                let mut m = Vec::with_capacity(g.len());
                for &r in g {
                    let (yi, mi) = (t.int(r, yc)?, t.int(r, mc)?);
                    if yi > mi {
                        return Err(Error::Parse { row: r + 2, column: "y".into(), message: format!("{yi} successes out of {mi}") });
                    }
                    y.push(yi as u32);
                    m.push(mi as u32);
                }
                clusters.push(Cluster::Binomial(BinomialCluster { y, m, x: t.matrix(g, &xc)?, z: t.matrix(g, &zc)? }));
            }
        }
        Schema::Ordered => {
            let (yc, zc) = (t.col("y")?, need(t.numbered("z"), "z")?);
            let mut c = 0;
            for r in 0..t.rows.len() {
                let y = t.int(r, yc)?;
                if y == 0 {
                    return Err(Error::Parse { row: r + 2, column: "y".into(), message: "categories start at 1".into() });
                }
                c = c.max(y as usize);
            }
            for g in &groups {
                let y = g.iter().map(|&r| t.int(r, yc).map(|v| v as usize)).collect::<Result<_>>()?;
                clusters.push(Cluster::Ordered(OrderedCluster { y, c: c.max(2), x: t.matrix(g, &xc)?, z: t.matrix(g, &zc)? }));
            }
        }
        Schema::Multinomial => {
            let yc = t.col("y")?;
            let c = (1..).take_while(|j| t.col(&format!("z{j}_1")).is_ok()).count();
            if c < 2 {
                return Err(Error::SchemaMismatch("need z1_1 and z2_1 columns".into()));
            }
            let k = need(t.numbered("z1_"), "z1_")?.len();
            let zc: Vec<Vec<usize>> = (1..=c).map(|j| (1..=k).map(|kk| t.col(&format!("z{j}_{kk}"))).collect()).collect::<Result<_>>()?;
            for g in &groups {
                let mut y = Vec::with_capacity(g.len());
                let mut z = Vec::with_capacity(g.len());
                for &r in g {
                    let yi = t.int(r, yc)? as usize;
                    if yi == 0 || yi > c {
                        return Err(Error::Parse { row: r + 2, column: "y".into(), message: format!("category {yi} outside 1..={c}") });
                    }
                    y.push(yi);
                    z.push(t.matrix(&[r], &zc.concat())?.reshape_generic(nalgebra::Dyn(k), nalgebra::Dyn(c)).transpose());
                }
                clusters.push(Cluster::Multinomial(MultinomialCluster { y, c, x: t.matrix(g, &xc)?, z }));
            }
        }
        Schema::Gsm(basis) => {
            let (tc, ec, zc) = (t.col("time")?, t.col("event")?, need(t.numbered("z"), "z")?);
            let mut times = Vec::with_capacity(t.rows.len());
            let mut events = Vec::with_capacity(t.rows.len());
            for r in 0..t.rows.len() {
                let e = t.int(r, ec)?;
                if e > 1 {
                    return Err(Error::Parse { row: r + 2, column: "event".into(), message: "event must be 0 or 1".into() });
                }
                times.push(t.num(r, tc)?);
                events.push(e == 1);
            }
            let b: Box<dyn TimeBasis> = match basis {
                GsmBasis::Linear => Box::new(LinearTimeBasis),
                GsmBasis::Log => Box::new(LogTimeBasis),
                GsmBasis::ISpline(n) => Box::new(ISplineBasis::from_times(&times, &events, n, 3)?),
            };
            for g in &groups {
                let time = g.iter().map(|&r| times[r]).collect();
                let event = g.iter().map(|&r| events[r]).collect();
                clusters.push(Cluster::Gsm(GsmCluster::from_basis(time, event, &t.matrix(g, &xc)?, t.matrix(g, &zc)?, b.as_ref())?));
            }
        }
        Schema::Salamander => unreachable!(),
    }
    Ok(Dataset { ids, clusters, cov: None })
}

fn salamander(t: &Table, ids: Vec<String>, groups: &[Vec<usize>]) -> Result<Dataset> {
    let (yc, mc, fc) = (t.col("y")?, t.col("wsm")?, t.col("wsf")?);
    let (mid, fid) = (t.col("male_id")?, t.col("female_id")?);
    let index = |g: &[usize], col: usize| -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for &r in g {
            let n = m.len();
            m.entry(t.rows[r][col].trim().to_string()).or_insert(n);
        }
        m
    };
    let nf = groups.iter().map(|g| index(g, fid).len()).max().unwrap_or(0);
    let nm = groups.iter().map(|g| index(g, mid).len()).max().unwrap_or(0);
    let mut clusters = Vec::with_capacity(groups.len());
    for g in groups {
        let (fi, mi) = (index(g, fid), index(g, mid));
        let n = g.len();
        let mut x = Matrix::zeros(n, 4);
        let mut z = Matrix::zeros(n, nf + nm);
        let mut y = Vec::with_capacity(n);
        for (i, &r) in g.iter().enumerate() {
            let yi = t.int(r, yc)?;
            if yi > 1 {
                return Err(Error::Parse { row: r + 2, column: "y".into(), message: "outcome must be 0 or 1".into() });
            }
            y.push(yi as u32);
            let (wm, wf) = (t.num(r, mc)?, t.num(r, fc)?);
            x.row_mut(i).copy_from_slice(&[1.0, wm, wf, wm * wf]);
            z[(i, fi[t.rows[r][fid].trim()])] = 1.0;
            z[(i, nf + mi[t.rows[r][mid].trim()])] = 1.0;
        }
        clusters.push(Cluster::Binomial(BinomialCluster { y, m: vec![1; n], x, z }));
    }
    let cov = CovStructure::Grouped([vec![0; nf], vec![1; nm]].concat());
    Ok(Dataset { ids, clusters, cov: Some(cov) })
}
