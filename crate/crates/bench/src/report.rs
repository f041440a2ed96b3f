//! Report rows, per-cell aggregates and method orderings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// One CSV row: `method,rank,seed,params,permille,final_metric,wallclock_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub params: usize,
    pub permille: f64,
    /// Final task loss or test accuracy; NaN for a failed cell.
    pub final_metric: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Loss-like metric.
    Lower,
    /// Accuracy-like metric.
    Higher,
}

impl Direction {
    pub fn from_metric(name: &str) -> Result<Self> {
        match name {
            "loss" => Ok(Direction::Lower),
            "accuracy" => Ok(Direction::Higher),
            other => Err(BenchError::Config(format!("unknown metric `{other}`, expected loss or accuracy"))),
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Direction::Lower => "loss",
            Direction::Higher => "accuracy",
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Lower => a < b,
            Direction::Higher => a > b,
        }
    }
}

pub fn write_csv<W: io::Write>(rows: &[Row], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| BenchError::io("csv output", e))?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Row>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| BenchError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    Ok(r.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?)
}

/// Mean and spread of one `(method, rank)` cell over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub rank: usize,
    pub seeds: usize,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
    /// Standard error of the mean; present with two or more seeds.
    pub stderr: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates in order of first appearance.
pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut values: BTreeMap<(String, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for row in rows {
        let key = (row.method.clone(), row.rank);
        let entry = values.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), 0)
        });
        if row.final_metric.is_finite() {
            entry.0.push(row.final_metric);
        } else {
            entry.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (vals, failed) = &values[&key];
            let (mean, std) = mean_std(vals);
            Aggregate {
                method: key.0,
                rank: key.1,
                seeds: vals.len(),
                failed: *failed,
                mean,
                std,
                stderr: (vals.len() >= 2).then(|| std / (vals.len() as f64).sqrt()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinFraction {
    pub better: String,
    pub worse: String,
    /// Share of paired seeds where `better` beats `worse`; ties count half.
    pub fraction: f64,
    pub seeds: usize,
}

fn metric_by_seed(rows: &[Row], method: &str, rank: usize) -> BTreeMap<u64, f64> {
    rows.iter()
        .filter(|r| r.method == method && r.rank == rank)
        .map(|r| (r.seed, r.final_metric))
        .collect()
}

/// How often `a` beats `b` on the seeds both completed at `rank`.
pub fn win_fraction(rows: &[Row], a: &str, b: &str, rank: usize, direction: Direction) -> Result<WinFraction> {
    let ma = metric_by_seed(rows, a, rank);
    let mb = metric_by_seed(rows, b, rank);
    if ma.is_empty() || mb.is_empty() {
        return Err(BenchError::Mismatch(format!("no rows for `{a}` or `{b}` at rank {rank}")));
    }
    let mut score = 0.0;
    let mut seeds = 0;
    for (seed, va) in &ma {
        let Some(vb) = mb.get(seed) else { continue };
        if !(va.is_finite() && vb.is_finite()) {
            continue;
        }
        seeds += 1;
        if direction.better(*va, *vb) {
            score += 1.0;
        } else if va == vb {
            score += 0.5;
        }
    }
    Ok(WinFraction {
        better: a.to_string(),
        worse: b.to_string(),
        fraction: if seeds == 0 { f64::NAN } else { score / seeds as f64 },
        seeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOrdering {
    pub rank: usize,
    /// Best first.
    pub entries: Vec<Aggregate>,
    /// Every ordered pair implied by `entries`.
    pub wins: Vec<WinFraction>,
}

/// Per rank, methods sorted by mean metric plus pairwise win fractions.
pub fn compare_methods(rows: &[Row], direction: Direction) -> Result<Vec<RankOrdering>> {
    let ranks: BTreeSet<usize> = rows.iter().map(|r| r.rank).collect();
    let aggregates = aggregate(rows);
    let mut out = Vec::new();
    for rank in ranks {
        let mut entries: Vec<Aggregate> = aggregates.iter().filter(|a| a.rank == rank).cloned().collect();
        let seed_sets: Vec<BTreeSet<u64>> = entries
            .iter()
            .map(|a| metric_by_seed(rows, &a.method, rank).into_keys().collect())
            .collect();
        if seed_sets.windows(2).any(|w| w[0] != w[1]) {
            return Err(BenchError::Mismatch(format!("methods at rank {rank} do not share the same seeds")));
        }
        entries.sort_by(|a, b| {
            let (x, y) = match direction {
                Direction::Lower => (a.mean, b.mean),
                Direction::Higher => (b.mean, a.mean),
            };
            x.total_cmp(&y)
        });
        let mut wins = Vec::new();
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                wins.push(win_fraction(rows, &entries[i].method, &entries[j].method, rank, direction)?);
            }
        }
        out.push(RankOrdering { rank, entries, wins });
    }
    Ok(out)
}

pub fn format_orderings(orderings: &[RankOrdering], direction: Direction) -> String {
    let mut s = String::new();
    for o in orderings {
        let _ = writeln!(s, "rank {} (mean {}, best first)", o.rank, direction.metric_name());
        for e in &o.entries {
            let stderr = e.stderr.map_or("-".to_string(), |v| format!("{v:.4e}"));
            let _ = writeln!(
                s,
                "  {:<24} mean {:.6e}  stderr {}  seeds {}  failed {}",
                e.method, e.mean, stderr, e.seeds, e.failed
            );
        }
        for w in &o.wins {
            let _ = writeln!(
                s,
                "  {} beats {} on {:.2} of {} seeds",
                w.better, w.worse, w.fraction, w.seeds
            );
        }
    }
    s
}
