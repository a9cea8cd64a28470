//! Ablation tables aggregated from training logs and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ecam_train::metrics::MeanStd;
use ecam_train::trainer::Ablation;
use serde_json::Value;

#[derive(Debug, Default)]
struct Group {
    rows: Vec<Vec<f64>>,
}

/// Collected final-epoch losses and evaluation metrics, keyed by
/// configuration name.
#[derive(Debug, Default)]
pub struct Table {
    logs: BTreeMap<String, Group>,
    metrics: BTreeMap<String, Group>,
}

const LOG_COLS: [&str; 5] = ["variety", "env_col", "map_nce", "total", "colliding_fraction"];
const METRIC_COLS: [&str; 3] = ["ade_min", "fde_min", "ecfl"];

fn number(v: &Value) -> Option<f64> {
    v.as_f64().or_else(|| v.get("mean").and_then(Value::as_f64))
}

fn label(v: &Value) -> String {
    v.get("ablation").and_then(Value::as_str).unwrap_or("unknown").to_string()
}

impl Table {
    /// Adds a JSON-lines training log (its last epoch) or an evaluation
    /// report.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(v) = serde_json::from_str::<Value>(&text) {
            if v.get("ade_min").is_some() {
                // repeated runs contribute one row each
                let runs = match v.get("per_run").and_then(Value::as_array) {
                    Some(r) => r.clone(),
                    None => vec![v.clone()],
                };
                for run in &runs {
                    let row = METRIC_COLS
                        .iter()
                        .map(|c| run.get(*c).and_then(number).with_context(|| format!("{}: missing {c}", path.display())))
                        .collect::<Result<Vec<_>>>()?;
                    self.metrics.entry(label(&v)).or_default().rows.push(row);
                }
                return Ok(());
            }
        }
        let last = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .filter_map(|l| serde_json::from_str::<Value>(l).ok())
            .rfind(|v| v.get("epoch").is_some());
        let Some(v) = last else {
            bail!("{} is neither an evaluation report nor a training log", path.display());
        };
        let mut row = vec![v["epoch"].as_f64().unwrap_or(0.0) + 1.0];
        for c in LOG_COLS {
            row.push(v.get(c).and_then(Value::as_f64).unwrap_or(0.0));
        }
        self.logs.entry(label(&v)).or_default().rows.push(row);
        Ok(())
    }

    fn ordered(groups: &BTreeMap<String, Group>) -> Vec<(String, &Group)> {
        let mut out: Vec<(String, &Group)> = Ablation::ALL
            .iter()
            .filter_map(|a| groups.get(a.name()).map(|g| (a.row_label().to_string(), g)))
            .collect();
        for (k, g) in groups {
            if k.parse::<Ablation>().is_err() {
                out.push((k.clone(), g));
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let col = |g: &Group, i: usize, f: &dyn Fn(f64) -> f64| MeanStd::of(&g.rows.iter().map(|r| f(r[i])).collect::<Vec<_>>());
        let pm = |m: MeanStd, digits: usize| format!("{:.*} ± {:.*}", digits, m.mean, digits, m.std);
        if !self.metrics.is_empty() {
            let _ = writeln!(
                out,
                "{:<12} {:>4}  {:>17}  {:>17}  {:>15}  {:>15}",
                "Config", "Runs", "ADE_min (m)", "FDE_min (m)", "ECFL (%)", "Collision (%)"
            );
            for (name, g) in Self::ordered(&self.metrics) {
                let _ = writeln!(
                    out,
                    "{:<12} {:>4}  {:>17}  {:>17}  {:>15}  {:>15}",
                    name,
                    g.rows.len(),
                    pm(col(g, 0, &|v| v), 4),
                    pm(col(g, 1, &|v| v), 4),
                    pm(col(g, 2, &|v| v), 2),
                    pm(col(g, 2, &|v| 100.0 - v), 2),
                );
            }
        }
        if !self.logs.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(
                out,
                "{:<12} {:>4} {:>6}  {:>10} {:>10} {:>10} {:>10}  {:>13}",
                "Config", "Runs", "Epochs", "Variety", "EnvCol", "MapNCE", "Total", "Colliding (%)"
            );
            for (name, g) in Self::ordered(&self.logs) {
                let m = |i: usize| col(g, i, &|v| v).mean;
                let _ = writeln!(
                    out,
                    "{:<12} {:>4} {:>6}  {:>10.4} {:>10.4} {:>10.4} {:>10.4}  {:>13.2}",
                    name,
                    g.rows.len(),
                    m(0),
                    m(1),
                    m(2),
                    m(3),
                    m(4),
                    100.0 * m(5),
                );
            }
        }
        out
    }
}
