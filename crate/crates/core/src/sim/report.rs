use std::fs;
use std::path::Path;

use serde::Serialize;

use super::experiment::ExperimentReport;
use crate::error::{PqlError, Result};

#[derive(Serialize)]
struct Row<'a> {
    family: &'a str,
    model: String,
    m: usize,
    n: usize,
    regime: String,
    target: &'a str,
    coverage: f64,
    bias: f64,
    shapiro_p: Option<f64>,
    frobenius_mean: f64,
    replicates_used: usize,
    dropped: usize,
}

fn shapiro_for(report: &ExperimentReport, key: &str) -> Option<f64> {
    let (target, comp) = key.rsplit_once('_')?;
    let k: usize = comp.parse().ok()?;
    *report.shapiro_p.get(target)?.get(k.checked_sub(1)?)?
}

/// One row per (report, target component).
pub fn report_csv(reports: &[ExperimentReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        let model = serde_json::to_value(r.model).ok().and_then(|v| v.get("kind").and_then(|k| k.as_str().map(String::from)));
        let regime = serde_json::to_value(r.regime).ok().and_then(|v| v.as_str().map(String::from));
        for (target, cov) in &r.coverage {
            w.serialize(Row {
                family: &r.family,
                model: model.clone().unwrap_or_default(),
                m: r.m,
                n: r.n,
                regime: regime.clone().unwrap_or_default(),
                target,
                coverage: *cov,
                bias: r.bias.get(target).copied().unwrap_or(f64::NAN),
                shapiro_p: shapiro_for(r, target),
                frobenius_mean: r.frobenius_mean,
                replicates_used: r.replicates_used,
                dropped: r.dropped,
            })
            .map_err(|e| PqlError::Io(format!("csv: {e}")))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| PqlError::Io(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| PqlError::Io(e.to_string()))
}

/// Writes the CSV table and the pretty-printed JSON reports.
pub fn write_reports(reports: &[ExperimentReport], csv_path: &Path, json_path: &Path) -> Result<()> {
    let io = |p: &Path, e: std::io::Error| PqlError::Io(format!("{}: {e}", p.display()));
    fs::write(csv_path, report_csv(reports)?).map_err(|e| io(csv_path, e))?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| PqlError::Io(e.to_string()))?;
    fs::write(json_path, json + "\n").map_err(|e| io(json_path, e))
}
