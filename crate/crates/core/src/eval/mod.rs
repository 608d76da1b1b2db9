//! Localization metrics: building/floor accuracy and mean position error,
//! plus the KNN sanity baseline and the latency benchmark.

pub mod bench;
pub mod knn;
pub mod report;

#[cfg(test)]
mod tests;

use crate::dataset::{RpCatalog, SampleSet};
use crate::error::{Error, Result};
use crate::infer::InferModel;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Percent of samples whose predicted building matches.
    pub building_pct: f64,
    /// Percent of samples whose predicted floor matches.
    pub floor_pct: f64,
    /// Percent of samples whose exact reference point matches.
    pub class_pct: f64,
    /// Mean Euclidean position error in meters.
    pub position_m: f64,
    pub per_sample_m: Vec<f64>,
    pub n: usize,
    /// Test samples whose true 4-tuple never occurs in the catalog; they are
    /// scored normally (truth comes from their own coordinates) but can
    /// never be exact-class correct.
    pub unseen_tuples: usize,
    pub model_hash: u64,
    pub label: String,
}

/// Euclidean distance in the dataset's metric plane between a predicted
/// class's reference coordinate and the true position.
pub fn position_error(catalog: &RpCatalog, class: usize, lon: f64, lat: f64) -> Result<f64> {
    let entry = catalog
        .entry(class)
        .ok_or_else(|| Error::Data(format!("class {class} has no catalog coordinates")))?;
    Ok(((entry.longitude - lon).powi(2) + (entry.latitude - lat).powi(2)).sqrt())
}

/// Scores a vector of predicted classes against the test set.
pub fn evaluate_predictions(
    predictions: &[usize],
    test: &SampleSet,
    catalog: &RpCatalog,
    model_hash: u64,
    label: &str,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    if predictions.len() != test.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} samples",
            predictions.len(),
            test.len()
        )));
    }
    let mut building_ok = 0usize;
    let mut floor_ok = 0usize;
    let mut class_ok = 0usize;
    let mut unseen = 0usize;
    let mut per_sample = Vec::with_capacity(test.len());
    for (i, &class) in predictions.iter().enumerate() {
        let entry = catalog
            .entry(class)
            .ok_or_else(|| Error::Data(format!("predicted class {class} not in catalog")))?;
        if entry.key.0 == test.buildings[i] {
            building_ok += 1;
        }
        if entry.key.1 == test.floors[i] && entry.key.0 == test.buildings[i] {
            floor_ok += 1;
        }
        if test.labels[i] == u32::MAX {
            unseen += 1;
        } else if class == test.labels[i] as usize {
            class_ok += 1;
        }
        per_sample.push(position_error(catalog, class, test.longitudes[i], test.latitudes[i])?);
    }
    let n = test.len();
    Ok(EvalReport {
        building_pct: 100.0 * building_ok as f64 / n as f64,
        floor_pct: 100.0 * floor_ok as f64 / n as f64,
        class_pct: 100.0 * class_ok as f64 / n as f64,
        position_m: per_sample.iter().sum::<f64>() / n as f64,
        per_sample_m: per_sample,
        n,
        unseen_tuples: unseen,
        model_hash,
        label: label.to_string(),
    })
}

/// Runs the model over the test set (parallel across samples, shared
/// read-only weights) and scores the predictions.
pub fn evaluate(
    model: &InferModel,
    test: &SampleSet,
    catalog: &RpCatalog,
    label: &str,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let predictions: Vec<usize> = (0..test.len())
        .into_par_iter()
        .map(|i| model.predict_image(test.image(i)).map(|(_, top1)| top1))
        .collect::<Result<_>>()?;
    evaluate_predictions(&predictions, test, catalog, model.model_hash(), label)
}
