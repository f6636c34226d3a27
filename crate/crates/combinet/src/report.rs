//! Run reports: per-run records, aggregated cells, markdown rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use combinet_core::data::Slice;
use combinet_core::Mapping;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const NOVEL_ACCURACY: &str = "novel_accuracy";
pub const ORIGINAL_ACCURACY: &str = "original_accuracy";
pub const KL: &str = "kl";
pub const INCEPTION: &str = "inception";

/// One evaluated model or generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub method: String,
    /// Aggregation cell, e.g. the slice size.
    pub cell: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<Slice>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mappings: Vec<Mapping>,
    /// Paths relative to the run directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub cell: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub seed: u64,
    pub config: Value,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    pub wall_seconds: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Group runs by (method, cell, metric) in order of first appearance.
pub fn aggregate(runs: &[RunRecord]) -> Vec<CellSummary> {
    let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    for r in runs {
        for (metric, &v) in &r.metrics {
            let key = (r.method.clone(), r.cell.clone(), metric.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, vals)) => vals.push(v),
                None => groups.push((key, vec![v])),
            }
        }
    }
    groups
        .into_iter()
        .map(|((method, cell, metric), vals)| {
            let (mean, std) = mean_std(&vals);
            CellSummary {
                method,
                cell,
                metric,
                n: vals.len(),
                mean,
                std,
            }
        })
        .collect()
}

impl RunReport {
    pub fn new(kind: &str, seed: u64, config: Value, runs: Vec<RunRecord>, wall_seconds: f64) -> Self {
        let cells = aggregate(&runs);
        Self {
            kind: kind.into(),
            seed,
            config,
            runs,
            cells,
            wall_seconds,
        }
    }

    pub fn cell(&self, method: &str, cell: &str, metric: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.cell == cell && c.metric == metric)
    }

    /// Check the cells against the runs and that every listed artifact exists under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let fresh = aggregate(&self.runs);
        if fresh.len() != self.cells.len() {
            return Err(Error::Config(format!(
                "report lists {} cells, runs give {}",
                self.cells.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(&self.cells) {
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0) || (x.is_nan() && y.is_nan());
            if a.method != b.method || a.cell != b.cell || a.metric != b.metric || a.n != b.n || !close(a.mean, b.mean) || !close(a.std, b.std) {
                return Err(Error::Config(format!("cell {}/{}/{} does not match its runs", b.method, b.cell, b.metric)));
            }
        }
        for r in &self.runs {
            for p in r.artifacts.values() {
                if !dir.join(p).exists() {
                    return Err(Error::Config(format!("run {} lists missing artifact {p}", r.id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# {} (seed {})\n", self.kind, self.seed);
        let mut methods: Vec<&str> = Vec::new();
        let mut cells: Vec<&str> = Vec::new();
        let mut metrics: Vec<&str> = Vec::new();
        for c in &self.cells {
            for (list, v) in [(&mut methods, &c.method), (&mut cells, &c.cell), (&mut metrics, &c.metric)] {
                if !list.contains(&v.as_str()) {
                    list.push(v);
                }
            }
        }
        for metric in &metrics {
            let _ = writeln!(md, "## {metric}\n");
            let _ = writeln!(md, "| cell | {} |", methods.join(" | "));
            let _ = writeln!(md, "|---|{}", "---|".repeat(methods.len()));
            for cell in &cells {
                let row: Vec<String> = methods
                    .iter()
                    .map(|m| match self.cell(m, cell, metric) {
                        Some(s) if s.n > 1 => format!("{:.4} ± {:.4}", s.mean, s.std),
                        Some(s) => format!("{:.4}", s.mean),
                        None => "".into(),
                    })
                    .collect();
                if row.iter().any(|r| !r.is_empty()) {
                    let _ = writeln!(md, "| {cell} | {} |", row.join(" | "));
                }
            }
            md.push('\n');
        }
        let _ = writeln!(md, "## runs\n");
        let _ = writeln!(md, "| id | method | cell | metrics | wall s |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for r in &self.runs {
            let m: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            let _ = writeln!(md, "| {} | {} | {} | {} | {:.2} |", r.id, r.method, r.cell, m.join(", "), r.wall_seconds);
        }
        let _ = writeln!(md, "\nTotal wall time {:.2} s.", self.wall_seconds);
        md
    }
}
