//! Delta arithmetic between an alternative algorithm and its
//! backpropagation baseline, and rendering of comparison tables.
//!
//! Accuracy deltas are absolute differences in percentage points; time,
//! energy and memory deltas are relative changes against the baseline, in
//! percent. Negative efficiency deltas favor the alternative.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregate figures of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Test accuracy in percent.
    pub accuracy_pct: f64,
    pub time_s: f64,
    pub energy_wh: f64,
    pub peak_mem_mib: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub architecture: String,
    #[serde(default)]
    pub algorithm: String,
    pub d_acc: f64,
    /// `None` when the baseline value is zero or missing.
    pub d_time: Option<f64>,
    pub d_energy: Option<f64>,
    pub d_mem: Option<f64>,
}

/// `100·(alt − base)/base`, undefined for a zero or missing baseline.
pub fn relative_delta(alt: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (alt, base) {
        (Some(a), Some(b)) if b != 0.0 && a.is_finite() && b.is_finite() => Some(100.0 * (a - b) / b),
        _ => None,
    }
}

pub fn compare(dataset: &str, architecture: &str, algorithm: &str, alt: &MetricSummary, base: &MetricSummary) -> ComparisonRow {
    ComparisonRow {
        dataset: dataset.to_string(),
        architecture: architecture.to_string(),
        algorithm: algorithm.to_string(),
        d_acc: alt.accuracy_pct - base.accuracy_pct,
        d_time: relative_delta(Some(alt.time_s), Some(base.time_s)),
        d_energy: relative_delta(Some(alt.energy_wh), Some(base.energy_wh)),
        d_mem: relative_delta(alt.peak_mem_mib, base.peak_mem_mib),
    }
}

/// Rounds half away from zero. A relative tolerance of 1e-12 absorbs binary
/// representation error, so `-33.805` becomes `-33.81`.
pub fn round_half_away(x: f64, decimals: i32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(decimals);
    let scaled = x.abs() * scale;
    let rounded = (scaled + 0.5 + scaled.max(1.0) * 1e-12).floor();
    x.signum() * rounded / scale
}

fn fmt_delta(v: Option<f64>) -> String {
    match v {
        Some(x) => {
            let r = round_half_away(x, 2);
            let r = if r == 0.0 { 0.0 } else { r };
            if r > 0.0 {
                format!("+{r:.2}")
            } else {
                format!("{r:.2}")
            }
        }
        None => "n/a".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "md" | "markdown" => Ok(Self::Markdown),
            "" => Err(Error::Config("report format is empty".into())),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 6] = ["Dataset", "Architecture", "ΔAcc", "ΔTime", "ΔEnergy", "ΔMem"];

/// Column index of the best value (largest ΔAcc, smallest efficiency delta).
fn best_per_column(rows: &[ComparisonRow]) -> [Option<usize>; 4] {
    let cols: [Box<dyn Fn(&ComparisonRow) -> Option<f64>>; 4] = [
        Box::new(|r| Some(r.d_acc)),
        Box::new(|r| r.d_time.map(|v| -v)),
        Box::new(|r| r.d_energy.map(|v| -v)),
        Box::new(|r| r.d_mem.map(|v| -v)),
    ];
    cols.map(|f| {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if let Some(v) = f(r) {
                let v = round_half_away(v, 2);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|b| b.0)
    })
}

/// Renders rows with a fixed column order and two decimals. Markdown output
/// marks the best value of each delta column in bold when there is more
/// than one row.
pub fn render_report(rows: &[ComparisonRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("a report needs at least one row".into()));
    }
    let cells = |r: &ComparisonRow| {
        [
            r.dataset.clone(),
            r.architecture.clone(),
            fmt_delta(Some(r.d_acc)),
            fmt_delta(r.d_time),
            fmt_delta(r.d_energy),
            fmt_delta(r.d_mem),
        ]
    };
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&REPORT_COLUMNS.join(","));
            out.push('\n');
            for r in rows {
                let c = cells(r).map(|v| if v.contains(',') { format!("\"{v}\"") } else { v });
                out.push_str(&c.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Json => {
            let items: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    let round = |v: Option<f64>| v.map(|x| round_half_away(x, 2));
                    serde_json::json!({
                        "dataset": r.dataset,
                        "architecture": r.architecture,
                        "algorithm": r.algorithm,
                        "d_acc": round(Some(r.d_acc)),
                        "d_time": round(r.d_time),
                        "d_energy": round(r.d_energy),
                        "d_mem": round(r.d_mem),
                    })
                })
                .collect();
            out = serde_json::to_string_pretty(&items)?;
            out.push('\n');
        }
        ReportFormat::Markdown => {
            let best = if rows.len() > 1 { best_per_column(rows) } else { [None; 4] };
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|---|---|---:|---:|---:|---:|");
            for (i, r) in rows.iter().enumerate() {
                let mut c = cells(r);
                for (col, b) in best.iter().enumerate() {
                    if *b == Some(i) {
                        c[col + 2] = format!("**{}**", c[col + 2]);
                    }
                }
                let _ = writeln!(out, "| {} |", c.join(" | "));
            }
        }
    }
    Ok(out)
}
