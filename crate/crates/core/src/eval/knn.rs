//! K-nearest-neighbor baseline in normalized RSSI space: a sanity oracle
//! for the dataset plumbing, not a tuned competitor.

use super::EvalReport;
use crate::dataset::Fingerprint;
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::collections::BTreeMap;

fn majority<I: Iterator<Item = i32>>(values: I) -> i32 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    // Highest count; ties break on the smaller value for determinism.
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(v, _)| v).unwrap()
}

/// Euclidean KNN over the 520-dimensional normalized fingerprints. The
/// predicted coordinate is the mean of the k nearest training coordinates;
/// building and floor come from a majority vote among the neighbors.
pub fn knn_baseline(train: &[Fingerprint], test: &[Fingerprint], k: usize) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("knn needs non-empty train and test sets".into()));
    }
    let k = k.min(train.len());

    struct Scored {
        err_m: f64,
        building_ok: bool,
        floor_ok: bool,
    }
    let scored: Vec<Scored> = test
        .par_iter()
        .map(|q| {
            let mut dists: Vec<(f32, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut acc = 0.0f32;
                    for (a, b) in q.rssi.iter().zip(&t.rssi) {
                        let d = a - b;
                        acc += d * d;
                    }
                    (acc, i)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let neighbors: Vec<&Fingerprint> = dists[..k].iter().map(|&(_, i)| &train[i]).collect();
            let lon: f64 = neighbors.iter().map(|n| n.longitude).sum::<f64>() / k as f64;
            let lat: f64 = neighbors.iter().map(|n| n.latitude).sum::<f64>() / k as f64;
            let building = majority(neighbors.iter().map(|n| n.building));
            let floor = majority(neighbors.iter().map(|n| n.floor));
            Scored {
                err_m: ((lon - q.longitude).powi(2) + (lat - q.latitude).powi(2)).sqrt(),
                building_ok: building == q.building,
                floor_ok: building == q.building && floor == q.floor,
            }
        })
        .collect();

    let n = test.len();
    let per_sample: Vec<f64> = scored.iter().map(|s| s.err_m).collect();
    Ok(EvalReport {
        building_pct: 100.0 * scored.iter().filter(|s| s.building_ok).count() as f64 / n as f64,
        floor_pct: 100.0 * scored.iter().filter(|s| s.floor_ok).count() as f64 / n as f64,
        class_pct: f64::NAN, // coordinate regressor; no discrete class
        position_m: per_sample.iter().sum::<f64>() / n as f64,
        per_sample_m: per_sample,
        n,
        unseen_tuples: 0,
        model_hash: 0,
        label: format!("KNN-{k}"),
    })
}
