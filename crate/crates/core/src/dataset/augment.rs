//! Synthetic fingerprint generation.
//!
//! Per reference point: for each AP observed (non-zero) in at least one
//! sample, take the mean m of its non-zero values and the mean absolute
//! deviation d from that mean, then draw uniformly from
//! [max(0, m-d), min(1, m+d)]. APs that are zero in every sample stay
//! exactly zero. Originals are never mutated; synthetic samples carry the
//! reference point's label.

use super::{Fingerprint, NUM_APS};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-AP sampling interval for one reference point.
#[derive(Debug, Clone)]
pub struct RpProfile {
    /// (lo, hi) per AP; None when the AP is zero in all samples.
    pub bounds: Vec<Option<(f32, f32)>>,
}

pub fn rp_profile(samples: &[&Fingerprint]) -> Result<RpProfile> {
    if samples.is_empty() {
        return Err(Error::Data("augmentation needs at least one sample per reference point".into()));
    }
    let mut bounds = Vec::with_capacity(NUM_APS);
    for a in 0..NUM_APS {
        let nonzero: Vec<f32> = samples.iter().map(|s| s.rssi[a]).filter(|&v| v != 0.0).collect();
        if nonzero.is_empty() {
            bounds.push(None);
            continue;
        }
        let m = nonzero.iter().sum::<f32>() / nonzero.len() as f32;
        let d = nonzero.iter().map(|v| (v - m).abs()).sum::<f32>() / nonzero.len() as f32;
        let lo = (m - d).max(0.0);
        let hi = (m + d).min(1.0);
        bounds.push(Some((lo, hi)));
    }
    Ok(RpProfile { bounds })
}

/// Generates `count` synthetic fingerprints for one reference point. The RNG
/// stream is derived from (seed, class) so per-class generation is
/// deterministic even when classes run in parallel.
pub fn augment_rp(
    samples: &[&Fingerprint],
    count: usize,
    seed: u64,
    class: u32,
) -> Result<Vec<Fingerprint>> {
    let profile = rp_profile(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4155474du64 ^ ((class as u64) << 20));
    let template = samples[0];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rssi = vec![0.0f32; NUM_APS];
        for (a, b) in profile.bounds.iter().enumerate() {
            if let Some((lo, hi)) = b {
                rssi[a] = if hi > lo { rng.gen_range(*lo..*hi) } else { *lo };
            }
        }
        out.push(Fingerprint {
            rssi,
            longitude: template.longitude,
            latitude: template.latitude,
            floor: template.floor,
            building: template.building,
            space_id: template.space_id,
            relative_position: template.relative_position,
            timestamp: template.timestamp,
        });
    }
    Ok(out)
}

/// Augments a whole training set: `factor` synthetic samples per original,
/// grouped by reference point. Returns only the synthetic fingerprints; the
/// final dataset is original + synthetic.
pub fn augment_set(records: &[Fingerprint], factor: usize, seed: u64) -> Result<Vec<Fingerprint>> {
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<super::RpKey, Vec<&Fingerprint>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.rp_key()).or_default().push(r);
    }
    let mut synthetic = Vec::with_capacity(records.len() * factor);
    for (ci, (_, samples)) in by_class.into_iter().enumerate() {
        let count = samples.len() * factor;
        synthetic.extend(augment_rp(&samples, count, seed, ci as u32)?);
    }
    Ok(synthetic)
}
