//! Report rows and on-disk report formats.
//!
//! One `LayerReport` per (layer, quantizer, strategy, seed) cell. A cell
//! that failed keeps its identity fields and carries `run_error` instead of
//! numbers, so one bad layer never hides the rest of an experiment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fastobq_core::QuantGrid;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub qmin: i32,
    pub qmax: i32,
    pub scale_min: f64,
    pub scale_median: f64,
    pub scale_max: f64,
}

impl GridSummary {
    pub fn from_grid(grid: &QuantGrid) -> Self {
        let mut scales = grid.scales().to_vec();
        scales.sort_by(f64::total_cmp);
        let n = scales.len();
        let median = if n % 2 == 1 {
            scales[n / 2]
        } else {
            0.5 * (scales[n / 2 - 1] + scales[n / 2])
        };
        GridSummary {
            qmin: grid.qmin(),
            qmax: grid.qmax(),
            scale_min: scales[0],
            scale_median: median,
            scale_max: scales[n - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarningCounts {
    pub singular_pivot_fallbacks: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub quantizer: String,
    pub strategy: String,
    pub seed: u64,
    pub bits: u8,
    pub scheme: String,
    pub damping: f64,
    /// Sum over rows of ||(w - w_q) X||^2 for this layer, None on failure.
    pub error_total: Option<f64>,
    /// error_total / ||W X||^2_F, None on failure.
    pub error_normalized: Option<f64>,
    /// The round-to-nearest error on the same frozen grid.
    pub error_rtn_baseline: Option<f64>,
    pub wall_time_ms: Option<f64>,
    pub hinv_matrices_allocated: Option<u64>,
    /// Peak concurrent inverse-Hessian footprint: peak count * d_col^2 * 8.
    pub hinv_bytes_peak: Option<u64>,
    #[serde(default)]
    pub warnings: WarningCounts,
    pub grid: Option<GridSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_error: Option<String>,
}

impl LayerReport {
    pub fn is_ok(&self) -> bool {
        self.run_error.is_none()
    }
}

/// Canonical report order: (layer, quantizer, strategy, seed). Every writer
/// sorts first so output files are reproducible regardless of thread
/// scheduling.
pub fn sort_reports(reports: &mut [LayerReport]) {
    reports.sort_by(|a, b| {
        (&a.layer, &a.quantizer, &a.strategy, a.seed).cmp(&(
            &b.layer,
            &b.quantizer,
            &b.strategy,
            b.seed,
        ))
    });
}

pub fn write_reports_jsonl(path: &Path, reports: &[LayerReport]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for report in reports {
        serde_json::to_writer(&mut w, report)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<LayerReport>, HarnessError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary_csv(path: &Path, reports: &[LayerReport]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "layer",
        "quantizer",
        "strategy",
        "seed",
        "bits",
        "scheme",
        "damping",
        "error_total",
        "error_normalized",
        "error_rtn_baseline",
        "wall_time_ms",
        "hinv_matrices_allocated",
        "hinv_bytes_peak",
        "singular_pivot_fallbacks",
        "run_error",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.layer.clone(),
            r.quantizer.clone(),
            r.strategy.clone(),
            r.seed.to_string(),
            r.bits.to_string(),
            r.scheme.clone(),
            r.damping.to_string(),
            fmt_opt(r.error_total),
            fmt_opt(r.error_normalized),
            fmt_opt(r.error_rtn_baseline),
            fmt_opt(r.wall_time_ms),
            r.hinv_matrices_allocated
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.hinv_bytes_peak.map(|v| v.to_string()).unwrap_or_default(),
            r.warnings.singular_pivot_fallbacks.to_string(),
            r.run_error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::Io(io),
        other => HarnessError::Io(std::io::Error::other(format!("csv: {other:?}"))),
    }
}

/// Renders the per-quantizer error curve: successful rows only, sorted by
/// (layer, strategy, seed). Curves compare errors across strategies, which
/// only means something on a single grid, so mixing (bits, scheme) within
/// one quantizer's rows is an error.
pub fn error_curves_csv(reports: &[LayerReport], quantizer: &str) -> Result<String, HarnessError> {
    let mut rows: Vec<&LayerReport> = reports
        .iter()
        .filter(|r| r.quantizer == quantizer && r.is_ok())
        .collect();
    if let Some(first) = rows.first() {
        let key = (first.bits, first.scheme.clone());
        for r in &rows {
            if (r.bits, r.scheme.clone()) != key {
                return Err(HarnessError::MixedGrids(format!(
                    "quantizer '{quantizer}' has rows at {}b/{} and {}b/{}",
                    key.0, key.1, r.bits, r.scheme
                )));
            }
        }
    }
    rows.sort_by(|a, b| (&a.layer, &a.strategy, a.seed).cmp(&(&b.layer, &b.strategy, b.seed)));
    let mut out = String::from("layer,strategy,seed,error_total,error_normalized\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer,
            r.strategy,
            r.seed,
            r.error_total.unwrap_or(f64::NAN),
            r.error_normalized.unwrap_or(f64::NAN)
        ));
    }
    Ok(out)
}
