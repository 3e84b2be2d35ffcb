//! Result rows, CSV serialization and the summary table.
//!
//! CSV schemas (column names and order are fixed):
//!
//! * `results.csv`: `method,n,run,ndcg_expected,ndcg_greedy,logging_ndcg,
//!   skyline_ndcg,objective_final,wall_time_seconds`
//! * `summary.csv`: `method,n,runs,mean_ndcg_expected,p10_ndcg_expected,
//!   p90_ndcg_expected`
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a row back reproduces the exact values. `wall_time_seconds` is the one
//! non-deterministic column; determinism comparisons exclude it.

use std::collections::BTreeMap;

use cltr_core::{CltrError, Result};
use serde::{Deserialize, Serialize};

pub const RESULTS_HEADER: &str = "method,n,run,ndcg_expected,ndcg_greedy,logging_ndcg,skyline_ndcg,objective_final,wall_time_seconds";
pub const SUMMARY_HEADER: &str =
    "method,n,runs,mean_ndcg_expected,p10_ndcg_expected,p90_ndcg_expected";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n: usize,
    pub run: usize,
    pub ndcg_expected: f64,
    pub ndcg_greedy: f64,
    pub logging_ndcg: f64,
    pub skyline_ndcg: f64,
    pub objective_final: f64,
    pub wall_time_seconds: f64,
}

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.n,
            self.run,
            self.ndcg_expected,
            self.ndcg_greedy,
            self.logging_ndcg,
            self.skyline_ndcg,
            self.objective_final,
            self.wall_time_seconds
        )
    }

    /// The deterministic part of the row (everything but the wall time).
    pub fn deterministic_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.n,
            self.run,
            self.ndcg_expected,
            self.ndcg_greedy,
            self.logging_ndcg,
            self.skyline_ndcg,
            self.objective_final
        )
    }

    pub fn from_csv_line(line: &str) -> Result<ResultRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(CltrError::Parse {
                line: 0,
                message: format!("expected 9 CSV fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| CltrError::Parse { line: 0, message: format!("bad {what}") };
        Ok(ResultRow {
            method: fields[0].to_string(),
            n: fields[1].parse().map_err(|_| bad("n"))?,
            run: fields[2].parse().map_err(|_| bad("run"))?,
            ndcg_expected: fields[3].parse().map_err(|_| bad("ndcg_expected"))?,
            ndcg_greedy: fields[4].parse().map_err(|_| bad("ndcg_greedy"))?,
            logging_ndcg: fields[5].parse().map_err(|_| bad("logging_ndcg"))?,
            skyline_ndcg: fields[6].parse().map_err(|_| bad("skyline_ndcg"))?,
            objective_final: fields[7].parse().map_err(|_| bad("objective_final"))?,
            wall_time_seconds: fields[8].parse().map_err(|_| bad("wall_time_seconds"))?,
        })
    }
}

/// Sort rows into their canonical emission order.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.n.cmp(&b.n))
            .then(a.run.cmp(&b.run))
    });
}

pub fn write_results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => {
            return Err(CltrError::Parse {
                line: 1,
                message: format!("bad results header {other:?}"),
            })
        }
    }
    lines.filter(|l| !l.is_empty()).map(ResultRow::from_csv_line).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub runs: usize,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Linear-interpolation percentile: for sorted values `v_0..v_{m-1}` the
/// p-quantile sits at fractional index `p * (m - 1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-(method, n) mean and 10th/90th percentiles of `ndcg_expected`.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.method.clone(), row.n))
            .or_default()
            .push(row.ndcg_expected);
    }
    groups
        .into_iter()
        .map(|((method, n), mut values)| {
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite ndcg"));
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            SummaryRow {
                method,
                n,
                runs: values.len(),
                mean,
                p10: percentile(&values, 0.1),
                p90: percentile(&values, 0.9),
            }
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method, row.n, row.runs, row.mean, row.p10, row.p90
        ));
    }
    out
}
