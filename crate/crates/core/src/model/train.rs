//! Two-stage training: autoencoder reconstruction first, then the classifier
//! head with the encoder frozen. The same fit loop also drives post-prune
//! fine-tuning and quantization-aware training via its hooks.

use super::forward::{self, ActQuant, BuildOpts, ParamNodes, BN_MOMENTUM};
use super::weights::WeightStore;
use crate::dataset::{SampleSet, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::optim::Adam;
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// EMA momentum for activation ranges during quantization-aware training.
pub const ACT_RANGE_MOMENTUM: f32 = 0.99;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Early stopping: epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 64, lr: 1e-3, patience: 15, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub total_wall_ms: u64,
}

impl TrainLog {
    pub fn new(stage: &str, config: &TrainConfig) -> Self {
        Self {
            stage: stage.to_string(),
            seed: config.seed,
            config: config.clone(),
            epochs: Vec::new(),
            best_epoch: 0,
            best_metric: f64::NAN,
            total_wall_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Minimize reconstruction MSE of encoder+decoder; validation metric is
    /// MSE (lower is better).
    Reconstruction,
    /// Minimize cross-entropy of encoder+classifier; validation metric is
    /// accuracy (higher is better).
    Classification,
}

/// Hooks threaded through the shared fit loop.
pub struct FitOpts<'a> {
    pub objective: Objective,
    /// RNG domain separation between stages and fine-tune passes.
    pub stage: &'a str,
    /// Pruning masks enforced on gradients and values every step.
    pub masks: Option<&'a BTreeMap<String, Vec<bool>>>,
    /// Fake-quantize weights during forward (quantization-aware training).
    pub weight_quant_bits: Option<u8>,
    /// Quantize activations during forward with EMA ranges.
    pub act_quant_bits: Option<u8>,
    /// EMA state for activation ranges; updated in place.
    pub act_ranges: Option<&'a mut BTreeMap<String, f32>>,
}

impl<'a> FitOpts<'a> {
    pub fn plain(objective: Objective, stage: &'a str) -> Self {
        Self {
            objective,
            stage,
            masks: None,
            weight_quant_bits: None,
            act_quant_bits: None,
            act_ranges: None,
        }
    }
}

fn batch_tensor(set: &SampleSet, idxs: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idxs.len() * IMAGE_PIXELS);
    for &i in idxs {
        data.extend_from_slice(set.image(i));
    }
    Tensor::from_raw(vec![idxs.len(), IMAGE_SIDE, IMAGE_SIDE, 1], data)
}

fn batch_labels(set: &SampleSet, idxs: &[usize]) -> Result<Vec<usize>> {
    idxs.iter()
        .map(|&i| {
            let l = set.labels[i];
            if l == u32::MAX {
                Err(Error::Data(format!("sample {i} has no class in the catalog")))
            } else {
                Ok(l as usize)
            }
        })
        .collect()
}

/// Logits for a sample set under the given forward options, batched.
pub fn logits_for(store: &WeightStore, set: &SampleSet, opts: &mut BuildOpts) -> Result<Vec<f32>> {
    let classes = store.tensor("cls.fc2.b")?.numel();
    let mut out = Vec::with_capacity(set.len() * classes);
    let idxs: Vec<usize> = (0..set.len()).collect();
    for chunk in idxs.chunks(256) {
        let mut g = Graph::new();
        let images = batch_tensor(set, chunk);
        let (logits, _, _) = forward::classify_images(&mut g, store, images, opts)?;
        out.extend_from_slice(g.value(logits).data());
    }
    Ok(out)
}

/// Class probabilities and top-1 prediction for a batch of images
/// (inference-mode batch norm; probabilities sum to 1 per row).
pub fn predict(store: &WeightStore, set: &SampleSet) -> Result<(Vec<f32>, Vec<usize>)> {
    let classes = store.tensor("cls.fc2.b")?.numel();
    let logits = logits_for(store, set, &mut BuildOpts::infer())?;
    let probs = kernels::softmax_rows(&logits, set.len(), classes);
    let top1 = argmax_rows(&probs, classes);
    Ok((probs, top1))
}

pub fn argmax_rows(values: &[f32], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

fn classification_accuracy(store: &WeightStore, set: &SampleSet, opts: &mut BuildOpts) -> Result<f64> {
    let classes = store.tensor("cls.fc2.b")?.numel();
    let logits = logits_for(store, set, opts)?;
    let top1 = argmax_rows(&logits, classes);
    let correct = top1
        .iter()
        .zip(&set.labels)
        .filter(|&(&p, &l)| l != u32::MAX && p == l as usize)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

fn reconstruction_mse(store: &WeightStore, set: &SampleSet) -> Result<f64> {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    let idxs: Vec<usize> = (0..set.len()).collect();
    for chunk in idxs.chunks(256) {
        let mut g = Graph::new();
        let nodes = ParamNodes::insert_all(&mut g, store);
        let images = batch_tensor(set, chunk);
        let x = g.input(images);
        let mut opts = BuildOpts::infer();
        let h = forward::encode(&mut g, &nodes, x, &mut opts)?;
        let y = forward::decode(&mut g, &nodes, h)?;
        let loss = g.mse_loss(y, x)?;
        acc += g.loss_value(loss) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(acc / count as f64)
}

/// The shared training loop. Appends per-epoch rows to `log` as it goes so
/// a divergence abort still leaves a usable partial log; on success the
/// best-validation snapshot is restored into `store`.
pub fn fit(
    store: &mut WeightStore,
    train: &SampleSet,
    val: &SampleSet,
    config: &TrainConfig,
    mut opts: FitOpts,
    log: &mut TrainLog,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let started = Instant::now();
    let stage_hash = crate::io_util::fnv1a(opts.stage.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ stage_hash);
    let mut adam = Adam::new(config.lr);
    let mut indices: Vec<usize> = (0..train.len()).collect();

    let higher_is_better = opts.objective == Objective::Classification;
    let mut best_metric = if higher_is_better { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut best_snapshot: Option<WeightStore> = None;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let epoch_started = Instant::now();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;

        for batch in indices.chunks(config.batch_size) {
            // Train-mode batch norm needs at least two samples.
            if opts.objective == Objective::Classification && batch.len() < 2 {
                continue;
            }
            let images = batch_tensor(train, batch);
            let mut g = Graph::new();
            let nodes = ParamNodes::insert_all(&mut g, store);
            let x = g.input(images);

            let mut bopts = BuildOpts {
                train_bn: true,
                weight_quant_bits: opts.weight_quant_bits,
                act_quant: match (&opts.act_quant_bits, &mut opts.act_ranges) {
                    (Some(bits), Some(ranges)) => ActQuant::Ema {
                        bits: *bits,
                        ranges,
                        momentum: ACT_RANGE_MOMENTUM,
                    },
                    _ => ActQuant::Off,
                },
            };

            let (loss, bn_stats) = match opts.objective {
                Objective::Reconstruction => {
                    let h = forward::encode(&mut g, &nodes, x, &mut bopts)?;
                    let y = forward::decode(&mut g, &nodes, h)?;
                    (g.mse_loss(y, x)?, None)
                }
                Objective::Classification => {
                    let labels = batch_labels(train, batch)?;
                    let h = forward::encode(&mut g, &nodes, x, &mut bopts)?;
                    let (logits, stats) = forward::classify(&mut g, &nodes, store, h, &mut bopts)?;
                    (g.softmax_cross_entropy(logits, &labels)?, stats)
                }
            };

            let loss_value = g.loss_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at stage {} epoch {epoch}",
                    opts.stage
                )));
            }
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();

            g.backward(loss)?;

            adam.begin_step();
            let names = store.param_names();
            for name in names {
                let frozen = store.get(&name)?.frozen;
                if frozen {
                    continue;
                }
                let Some(grad) = g.grad(nodes.id(&name)) else { continue };
                let mut grad = grad.to_vec();
                if let Some(masks) = opts.masks {
                    if let Some(mask) = masks.get(&name) {
                        for (gv, &keep) in grad.iter_mut().zip(mask) {
                            if !keep {
                                *gv = 0.0;
                            }
                        }
                    }
                }
                adam.update(&name, store.tensor_mut(&name)?.data_mut(), &grad).map_err(|e| {
                    Error::Numeric(format!("stage {} epoch {epoch}: {e}", opts.stage))
                })?;
            }
            if let Some(masks) = opts.masks {
                store.apply_masks(masks)?;
            }

            if let Some(stats) = bn_stats {
                let mean = store.buffer_mut("cls.bn.mean")?;
                for (m, b) in mean.iter_mut().zip(&stats.mean) {
                    *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
                }
                let var = store.buffer_mut("cls.bn.var")?;
                for (v, b) in var.iter_mut().zip(&stats.var) {
                    *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }

        let val_metric = match opts.objective {
            Objective::Reconstruction => reconstruction_mse(store, val)?,
            Objective::Classification => {
                let mut vopts = BuildOpts {
                    train_bn: false,
                    weight_quant_bits: opts.weight_quant_bits,
                    act_quant: match (&opts.act_quant_bits, &opts.act_ranges) {
                        (Some(bits), Some(ranges)) => {
                            ActQuant::Fixed { bits: *bits, ranges }
                        }
                        _ => ActQuant::Off,
                    },
                };
                classification_accuracy(store, val, &mut vopts)?
            }
        };

        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_metric,
            wall_ms: epoch_started.elapsed().as_millis() as u64,
        });

        let improved = if higher_is_better { val_metric > best_metric } else { val_metric < best_metric };
        if improved {
            best_metric = val_metric;
            best_epoch = epoch;
            best_snapshot = Some(store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    if let Some(best) = best_snapshot {
        *store = best;
    }
    log.best_epoch = best_epoch;
    log.best_metric = best_metric;
    log.total_wall_ms = started.elapsed().as_millis() as u64;
    Ok(())
}

/// Stage 1: reconstruction training of encoder+decoder.
pub fn train_stage1(
    store: &mut WeightStore,
    train: &SampleSet,
    val: &SampleSet,
    config: &TrainConfig,
) -> Result<TrainLog> {
    let mut log = TrainLog::new("stage1", config);
    fit(store, train, val, config, FitOpts::plain(Objective::Reconstruction, "stage1"), &mut log)?;
    Ok(log)
}

/// Stage 2: classification training with the encoder frozen in place.
pub fn train_stage2(
    store: &mut WeightStore,
    train: &SampleSet,
    val: &SampleSet,
    config: &TrainConfig,
) -> Result<TrainLog> {
    store.set_frozen("enc.", true);
    let mut log = TrainLog::new("stage2", config);
    fit(store, train, val, config, FitOpts::plain(Objective::Classification, "stage2"), &mut log)?;
    Ok(log)
}
