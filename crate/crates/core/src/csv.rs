//! Long-format result tables: `tau_f,tau_b,seed,metric,value`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiments::{Aggregate, CellResult};

pub const HEADER: &str = "tau_f,tau_b,seed,metric,value";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedField {
    Seed(u64),
    /// Row aggregated over seeds.
    Agg,
}

impl fmt::Display for SeedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedField::Seed(s) => write!(f, "{s}"),
            SeedField::Agg => f.write_str("agg"),
        }
    }
}

impl FromStr for SeedField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "agg" {
            return Ok(SeedField::Agg);
        }
        s.parse()
            .map(SeedField::Seed)
            .map_err(|_| Error::Csv(format!("bad seed field `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub tau_f: f64,
    pub tau_b: f64,
    pub seed: SeedField,
    pub metric: String,
    pub value: f64,
}

impl CsvRow {
    pub fn new(tau_f: f64, tau_b: f64, seed: SeedField, metric: impl Into<String>, value: f64) -> Self {
        Self {
            tau_f,
            tau_b,
            seed,
            metric: metric.into(),
            value,
        }
    }

    /// Bitwise equality, NaN included.
    pub fn bitwise_eq(&self, other: &CsvRow) -> bool {
        self.tau_f.to_bits() == other.tau_f.to_bits()
            && self.tau_b.to_bits() == other.tau_b.to_bits()
            && self.seed == other.seed
            && self.metric == other.metric
            && self.value.to_bits() == other.value.to_bits()
    }
}

/// 17 significant digits: enough to round-trip every `f64`.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// One row per recorded metric of each cell; failed cells get a `failed` row.
pub fn cell_rows(results: &[CellResult]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for r in results {
        let seed = SeedField::Seed(r.seed);
        let mut push = |metric: &str, v: f64| rows.push(CsvRow::new(r.tau_forward, r.tau_backward, seed, metric, v));
        if r.error.is_some() {
            push("failed", 1.0);
            continue;
        }
        let metrics = [
            ("final_val_loss", r.final_val_loss),
            ("final_val_kl", r.final_val_kl),
            ("final_val_total", r.final_val_total),
            ("final_train_loss", r.final_train_loss),
        ];
        for (m, v) in metrics {
            if let Some(v) = v {
                push(m, v);
            }
        }
        push("runtime_seconds", r.runtime_seconds);
    }
    rows
}

/// `<metric>_mean` and, with two or more seeds, `<metric>_std` rows.
pub fn aggregate_rows(aggs: &[Aggregate]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for a in aggs {
        rows.push(CsvRow::new(a.tau_forward, a.tau_backward, SeedField::Agg, format!("{}_mean", a.metric), a.mean));
        if let Some(s) = a.std {
            rows.push(CsvRow::new(a.tau_forward, a.tau_backward, SeedField::Agg, format!("{}_std", a.metric), s));
        }
    }
    rows
}

pub fn to_csv_string(rows: &[CsvRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Csv("no result rows to write".into()));
    }
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        if r.metric.contains([',', '\n', '\r']) {
            return Err(Error::Csv(format!("metric name `{}` contains a separator", r.metric)));
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            format_f64(r.tau_f),
            format_f64(r.tau_b),
            r.seed,
            r.metric,
            format_f64(r.value)
        ));
    }
    Ok(out)
}

/// Writes `rows` to `path`; nothing is created when `rows` is empty.
pub fn emit_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let text = to_csv_string(rows)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(Error::Csv(format!("expected header `{HEADER}`, found {other:?}"))),
    }
    let num = |s: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|_| Error::Csv(format!("line {line}: bad number `{s}`")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let line = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Csv(format!("line {line}: expected 5 fields, found {}", f.len())));
            }
            Ok(CsvRow {
                tau_f: num(f[0], line)?,
                tau_b: num(f[1], line)?,
                seed: f[2].parse()?,
                metric: f[3].to_string(),
                value: num(f[4], line)?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Aggregate `<metric>_mean` values pivoted as rows τb × columns τf, axes sorted ascending.
pub fn heatmap(rows: &[CsvRow], metric: &str) -> (Vec<f64>, Vec<f64>, Vec<Vec<Option<f64>>>) {
    let name = format!("{metric}_mean");
    let picked: Vec<&CsvRow> = rows.iter().filter(|r| r.seed == SeedField::Agg && r.metric == name).collect();
    let axis = |get: fn(&CsvRow) -> f64| {
        let mut v: Vec<f64> = picked.iter().map(|r| get(r)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let taus_f = axis(|r| r.tau_f);
    let taus_b = axis(|r| r.tau_b);
    let mut grid = vec![vec![None; taus_f.len()]; taus_b.len()];
    for r in picked {
        let i = taus_b.iter().position(|&t| t == r.tau_b).unwrap();
        let j = taus_f.iter().position(|&t| t == r.tau_f).unwrap();
        grid[i][j] = Some(r.value);
    }
    (taus_b, taus_f, grid)
}
