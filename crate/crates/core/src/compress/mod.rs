//! Model compression: uniform quantization (post-training and
//! quantization-aware) plus connection/filter pruning, with deterministic
//! footprint accounting and a bit-packed storage container.

pub mod file;
pub mod footprint;
pub mod prune;
pub mod quant;


use crate::dataset::SampleSet;
use crate::error::{Error, Result};
use crate::model::forward::{ActQuant, BuildOpts};
use crate::model::train::{fit, FitOpts, Objective, TrainConfig, TrainLog};
use crate::model::weights::WeightStore;
use crate::model::ModelSpec;
use crate::tensor::{Graph, Tensor};
use prune::{build_mask, prunable_weights, PruneMask};
use quant::{channel_scales, QuantizedTensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Weights only.
    Wo,
    /// Weights and activations.
    Wa,
    /// Not quantized (32-bit weights).
    Nq,
}

impl QuantMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantMode::Wo => "WO",
            QuantMode::Wa => "WA",
            QuantMode::Nq => "NQ",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    Connection,
    Filter,
    ConnectionFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub bits: u8,
    pub mode: QuantMode,
    pub sparsity: f32,
    pub qat: bool,
    pub prune_kind: PruneKind,
}

impl CompressionConfig {
    pub fn fp32_baseline() -> Self {
        CompressionConfig {
            bits: 32,
            mode: QuantMode::Nq,
            sparsity: 0.0,
            qat: false,
            prune_kind: PruneKind::ConnectionFilter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 4 | 8 | 16 | 32) {
            return Err(Error::Config(format!("bits must be one of 2,4,8,16,32, got {}", self.bits)));
        }
        if (self.bits == 32) != (self.mode == QuantMode::Nq) {
            return Err(Error::Config(format!(
                "32-bit configs must use mode NQ and vice versa (bits {}, mode {})",
                self.bits,
                self.mode.as_str()
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity must be in [0,1), got {}", self.sparsity)));
        }
        if self.qat && self.mode == QuantMode::Nq {
            return Err(Error::Config("quantization-aware training needs a quantized mode".into()));
        }
        Ok(())
    }

    /// Human-readable label, e.g. "INT4-WO-25%" or "FP32-NQ-0%".
    pub fn label(&self) -> String {
        let head = if self.bits == 32 { "FP32".to_string() } else { format!("INT{}", self.bits) };
        let pct = (self.sparsity * 100.0).round() as u32;
        let qat = if self.qat { "-QAT" } else { "" };
        format!("{head}-{}-{pct}%{qat}", self.mode.as_str())
    }
}

/// The sweep grid: every bit width x {WO, WA} x sparsity x {PTQ, QAT}, plus
/// the unquantized pruning-only baselines.
pub fn default_grid() -> Vec<CompressionConfig> {
    let mut grid = Vec::new();
    for &bits in &[2u8, 4, 8, 16] {
        for &mode in &[QuantMode::Wo, QuantMode::Wa] {
            for &sparsity in &[0.0f32, 0.25, 0.5, 0.75] {
                for &qat in &[false, true] {
                    grid.push(CompressionConfig {
                        bits,
                        mode,
                        sparsity,
                        qat,
                        prune_kind: PruneKind::ConnectionFilter,
                    });
                }
            }
        }
    }
    for &sparsity in &[0.0f32, 0.25, 0.5, 0.75] {
        grid.push(CompressionConfig {
            bits: 32,
            mode: QuantMode::Nq,
            sparsity,
            qat: false,
            prune_kind: PruneKind::ConnectionFilter,
        });
    }
    grid
}

/// Training data handed to the pipeline for fine-tuning, quantization-aware
/// training, and activation calibration.
#[derive(Default, Clone, Copy)]
pub struct CompressInput<'a> {
    pub train: Option<&'a SampleSet>,
    pub val: Option<&'a SampleSet>,
    /// Samples for post-training activation-range calibration.
    pub calib: Option<&'a SampleSet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressOpts {
    pub seed: u64,
    pub qat_epochs: usize,
    pub finetune_epochs: usize,
    /// Post-prune FP32 fine-tuning kicks in at or above this sparsity.
    pub finetune_min_sparsity: f32,
    pub lr: f32,
    pub batch_size: usize,
    /// Number of calibration samples for post-training activation ranges.
    pub calib_samples: usize,
}

impl Default for CompressOpts {
    fn default() -> Self {
        Self {
            seed: 42,
            qat_epochs: 5,
            finetune_epochs: 10,
            finetune_min_sparsity: 0.5,
            lr: 1e-4,
            batch_size: 64,
            calib_samples: 512,
        }
    }
}

/// A compressed deployable model: quantized (or raw 32-bit) weights, full
/// precision biases and batch-norm parameters, pruning masks, and activation
/// ranges for weights+activations mode.
#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub config: CompressionConfig,
    pub seed: u64,
    /// Quantized conv/dense weights (empty in NQ mode), in name order.
    pub quantized: Vec<QuantizedTensor>,
    /// Raw 32-bit conv/dense weights (NQ mode only).
    pub weights_fp32: BTreeMap<String, Tensor>,
    /// Full-precision parameters: biases, batch-norm gamma/beta.
    pub fixed: BTreeMap<String, Tensor>,
    /// Batch-norm running statistics.
    pub buffers: BTreeMap<String, Vec<f32>>,
    pub masks: PruneMask,
    /// Per-site activation ranges (WA mode only), in name order.
    pub act_ranges: BTreeMap<String, f32>,
    /// Content hash of the trained store this model came from.
    pub base_hash: u64,
    pub catalog_hash: u64,
    /// Fine-tune/QAT log, when training ran inside the pipeline.
    pub train_log: Option<TrainLog>,
}

impl CompressedModel {
    /// Reassembles an inference-ready store with dequantized weights.
    pub fn to_store(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for q in &self.quantized {
            store.insert(&q.name, q.dequantize());
        }
        for (name, t) in &self.weights_fp32 {
            store.insert(name, t.clone());
        }
        for (name, t) in &self.fixed {
            store.insert(name, t.clone());
        }
        for (name, b) in &self.buffers {
            store.insert_buffer(name, b.clone());
        }
        Ok(store)
    }

    /// Activation quantization parameters for inference, if WA.
    pub fn act_quant(&self) -> Option<(u8, &BTreeMap<String, f32>)> {
        (self.config.mode == QuantMode::Wa).then_some((self.config.bits, &self.act_ranges))
    }
}

/// PTQ activation-range calibration: max observed post-ReLU value per site
/// over the calibration samples, run with the compressed weights in place.
fn calibrate_ranges(
    store: &WeightStore,
    calib: &SampleSet,
    samples: usize,
) -> Result<BTreeMap<String, f32>> {
    let mut ranges = BTreeMap::new();
    let n = calib.len().min(samples);
    if n == 0 {
        return Err(Error::Data("activation calibration needs at least one sample".into()));
    }
    let idxs: Vec<usize> = (0..n).collect();
    for chunk in idxs.chunks(128) {
        let mut data = Vec::with_capacity(chunk.len() * crate::dataset::IMAGE_PIXELS);
        for &i in chunk {
            data.extend_from_slice(calib.image(i));
        }
        let images = Tensor::from_raw(vec![chunk.len(), 24, 24, 1], data);
        let mut g = Graph::new();
        let mut opts = BuildOpts {
            train_bn: false,
            weight_quant_bits: None,
            act_quant: ActQuant::Observe(&mut ranges),
        };
        crate::model::forward::classify_images(&mut g, store, images, &mut opts)?;
    }
    Ok(ranges)
}

/// The compression pipeline: prune, then either quantization-aware
/// fine-tuning or direct post-training quantization, then assembly of the
/// bit-packed model and its footprint report.
pub fn compress(
    store: &WeightStore,
    spec: &ModelSpec,
    config: &CompressionConfig,
    input: CompressInput,
    opts: &CompressOpts,
) -> Result<(CompressedModel, footprint::FootprintReport)> {
    config.validate()?;
    let base_hash = store.content_hash();
    let catalog_hash = store
        .meta
        .get("catalog_hash")
        .and_then(|s| u64::from_str_radix(s, 16).ok())
        .unwrap_or(0);

    // The deployed model is encoder + classifier; the decoder is dropped.
    let mut deploy = store.without_prefix("dec.");

    // Prune.
    let masks = build_mask(&deploy, spec, config)?;
    masks.apply(&mut deploy)?;
    let train_masks = masks.as_train_masks();

    let mut train_log = None;
    let mut act_ranges: BTreeMap<String, f32> = BTreeMap::new();

    let tcfg = |epochs: usize| TrainConfig {
        epochs,
        batch_size: opts.batch_size,
        lr: opts.lr,
        patience: epochs,
        seed: opts.seed,
    };

    if config.qat {
        let (train, val) = match (input.train, input.val) {
            (Some(t), Some(v)) => (t, v),
            _ => {
                return Err(Error::Config(
                    "quantization-aware training requires train and validation data".into(),
                ))
            }
        };
        let cfg = tcfg(opts.qat_epochs);
        let mut log = TrainLog::new(&format!("qat-{}", config.label()), &cfg);
        let fit_opts = FitOpts {
            objective: Objective::Classification,
            stage: "qat",
            masks: Some(&train_masks),
            weight_quant_bits: Some(config.bits),
            act_quant_bits: (config.mode == QuantMode::Wa).then_some(config.bits),
            act_ranges: (config.mode == QuantMode::Wa).then_some(&mut act_ranges),
        };
        fit(&mut deploy, train, val, &cfg, fit_opts, &mut log)?;
        train_log = Some(log);
    } else if config.sparsity >= opts.finetune_min_sparsity && config.sparsity > 0.0 {
        if let (Some(train), Some(val)) = (input.train, input.val) {
            let cfg = tcfg(opts.finetune_epochs);
            let mut log = TrainLog::new(&format!("finetune-{}", config.label()), &cfg);
            let fit_opts = FitOpts {
                objective: Objective::Classification,
                stage: "finetune",
                masks: Some(&train_masks),
                weight_quant_bits: None,
                act_quant_bits: None,
                act_ranges: None,
            };
            fit(&mut deploy, train, val, &cfg, fit_opts, &mut log)?;
            train_log = Some(log);
        }
    }

    // Quantize the surviving weights.
    let weight_names = prunable_weights(spec);
    let mut quantized = Vec::new();
    let mut weights_fp32 = BTreeMap::new();
    if config.mode == QuantMode::Nq {
        for name in &weight_names {
            weights_fp32.insert(name.clone(), deploy.tensor(name)?.clone());
        }
    } else {
        for name in &weight_names {
            let tensor = deploy.tensor(name)?;
            let channels = *tensor.shape().last().unwrap();
            let mask = masks.weights.get(name).map(Vec::as_slice);
            let scales = channel_scales(tensor.data(), channels, mask);
            quantized.push(QuantizedTensor::from_weights(name, tensor, config.bits, scales)?);
        }
    }

    // Everything that stays 32-bit: biases, batch norm, running stats.
    let mut fixed = BTreeMap::new();
    for (name, p) in deploy.params() {
        if !weight_names.contains(name) {
            fixed.insert(name.clone(), p.tensor.clone());
        }
    }
    let buffers: BTreeMap<String, Vec<f32>> =
        deploy.buffers().map(|(n, b)| (n.clone(), b.clone())).collect();

    // Activation ranges for WA: EMA from QAT, or PTQ calibration with the
    // quantized weights in place.
    if config.mode == QuantMode::Wa && !config.qat {
        let calib = input
            .calib
            .ok_or_else(|| Error::Config("WA post-training quantization needs calibration samples".into()))?;
        let mut calib_store = WeightStore::new();
        for q in &quantized {
            calib_store.insert(&q.name, q.dequantize());
        }
        for (name, t) in &fixed {
            calib_store.insert(name, t.clone());
        }
        for (name, b) in &buffers {
            calib_store.insert_buffer(name, b.clone());
        }
        act_ranges = calibrate_ranges(&calib_store, calib, opts.calib_samples)?;
    }

    let model = CompressedModel {
        config: *config,
        seed: opts.seed,
        quantized,
        weights_fp32,
        fixed,
        buffers,
        masks,
        act_ranges,
        base_hash,
        catalog_hash,
        train_log,
    };
    let report = footprint::footprint_estimate(&model);
    Ok((model, report))
}
