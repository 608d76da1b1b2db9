//! Machine-readable sweep reports: one row per compression configuration.

use super::bench::LatencyStats;
use super::EvalReport;
use crate::compress::CompressionConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub bits: u8,
    pub mode: String,
    pub sparsity: f32,
    pub qat: bool,
    pub building_pct: f64,
    pub floor_pct: f64,
    pub position_m: f64,
    pub bytes: usize,
    pub latency_ms: f64,
}

impl SweepRow {
    pub fn new(
        config: &CompressionConfig,
        eval: &EvalReport,
        bytes: usize,
        latency: Option<&LatencyStats>,
    ) -> Self {
        SweepRow {
            bits: config.bits,
            mode: config.mode.as_str().to_string(),
            sparsity: config.sparsity,
            qat: config.qat,
            building_pct: eval.building_pct,
            floor_pct: eval.floor_pct,
            position_m: eval.position_m,
            bytes,
            latency_ms: latency.map(|l| l.median_ms).unwrap_or(f64::NAN),
        }
    }
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(format!("csv serialize: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv utf8: {e}")))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("csv parse: {e}"))))
        .collect()
}

/// Human-readable table for terminals and logs.
pub fn rows_to_text(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>10} {:>9} {:>11} {:>10} {:>11}\n",
        "config", "building%", "floor%", "position_m", "bytes", "latency_ms"
    ));
    for r in rows {
        let label = format!(
            "{}{}-{}%{}",
            if r.bits == 32 { "FP32".into() } else { format!("INT{}", r.bits) },
            format_args!("-{}", r.mode),
            (r.sparsity * 100.0).round() as u32,
            if r.qat { "-QAT" } else { "" }
        );
        out.push_str(&format!(
            "{:<16} {:>10.2} {:>9.2} {:>11.2} {:>10} {:>11.3}\n",
            label, r.building_pct, r.floor_pct, r.position_m, r.bytes, r.latency_ms
        ));
    }
    out
}

pub fn eval_to_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("model: {} (hash {:016x})\n", report.label, report.model_hash));
    out.push_str(&format!("samples: {}", report.n));
    if report.unseen_tuples > 0 {
        out.push_str(&format!(" ({} with reference points unseen in training)", report.unseen_tuples));
    }
    out.push('\n');
    out.push_str(&format!("building accuracy: {:.2}%\n", report.building_pct));
    out.push_str(&format!("floor accuracy:    {:.2}%\n", report.floor_pct));
    if report.class_pct.is_finite() {
        out.push_str(&format!("exact-RP accuracy: {:.2}%\n", report.class_pct));
    }
    out.push_str(&format!("mean position error: {:.2} m\n", report.position_m));
    out
}
