//! Single-threaded inference latency measurement, including the RSSI
//! vector-to-image pre-processing, with warm-up before timing.

use crate::error::{Error, Result};
use crate::infer::InferModel;
use serde::Serialize;
use std::time::Instant;

pub const WARMUP_RUNS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub repetitions: usize,
}

/// Times `repetitions` single-fingerprint predictions (pre-processing
/// included), cycling through the given fingerprints, after a warm-up.
pub fn latency_bench(
    model: &InferModel,
    fingerprints: &[Vec<f32>],
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions < 100 {
        return Err(Error::Config(format!(
            "latency benchmark needs at least 100 repetitions, got {repetitions}"
        )));
    }
    if fingerprints.is_empty() {
        return Err(Error::Data("latency benchmark needs at least one fingerprint".into()));
    }
    for i in 0..WARMUP_RUNS {
        let fp = &fingerprints[i % fingerprints.len()];
        model.predict_fingerprint(fp)?;
    }
    let mut samples_ms = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        let fp = &fingerprints[i % fingerprints.len()];
        let start = Instant::now();
        let out = model.predict_fingerprint(fp)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        samples_ms.push(elapsed);
    }
    samples_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatencyStats {
        mean_ms: samples_ms.iter().sum::<f64>() / repetitions as f64,
        median_ms: samples_ms[repetitions / 2],
        p95_ms: samples_ms[(repetitions * 95) / 100 - 1],
        repetitions,
    })
}

/// How many times faster `other` runs than `baseline`, by median.
pub fn speedup(baseline: &LatencyStats, other: &LatencyStats) -> f64 {
    baseline.median_ms / other.median_ms
}
