//! The CAE+CNN network: architecture description, parameter store, forward
//! builders, two-stage training, and prediction.

pub mod forward;
pub mod train;
pub mod weights;

#[cfg(test)]
mod tests;

use crate::dataset::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weights::WeightStore;

pub const NUM_CLASSES: usize = 905;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Encoder,
    Decoder,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv { kh: usize, kw: usize, in_ch: usize, out_ch: usize, stride: usize },
    MaxPool,
    Upsample,
    Flatten,
    Dense { in_dim: usize, out_dim: usize },
    BatchNorm { dim: usize },
    /// Final dense layer under a softmax output.
    Softmax { in_dim: usize, classes: usize },
}

/// One architecture row: name, block, operator, and output size (h, w, c);
/// dense-side layers use (1, 1, units).
#[derive(Debug, Clone)]
pub struct LayerInfo {
    pub name: String,
    pub block: Block,
    pub kind: LayerKind,
    pub output: [usize; 3],
}

impl LayerInfo {
    /// Stored parameter count: conv and dense carry weights+bias, batch norm
    /// carries gamma, beta and the two running statistics.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { kh, kw, in_ch, out_ch, .. } => kh * kw * in_ch * out_ch + out_ch,
            LayerKind::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerKind::Softmax { in_dim, classes } => in_dim * classes + classes,
            LayerKind::BatchNorm { dim } => 4 * dim,
            _ => 0,
        }
    }
}

/// Widths divided by `width_divisor` (for the reduced grad-check clone) and
/// a configurable class count; the shipped model uses the defaults.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub width_divisor: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width_divisor: 1, num_classes: NUM_CLASSES }
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub layers: Vec<LayerInfo>,
    pub config: ModelConfig,
}

/// The network of the localization model: a convolutional autoencoder whose
/// encoder feeds a CNN classifier head.
pub fn build_spec_with(config: ModelConfig) -> ModelSpec {
    let d = config.width_divisor;
    let side = IMAGE_SIDE;
    let half = side / 2;
    let quarter = half / 2;
    let eighth = quarter / 2;
    let (c16, c8, c32, fc) = (16 / d, 8 / d, 32 / d, 128 / d);
    let flat = eighth * eighth * c32;
    let classes = config.num_classes;
    let mk = |name: &str, block, kind, output| LayerInfo { name: name.into(), block, kind, output };
    let layers = vec![
        mk("input", Block::Encoder, LayerKind::Input, [side, side, 1]),
        mk(
            "enc.conv1",
            Block::Encoder,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: 1, out_ch: c16, stride: 1 },
            [side, side, c16],
        ),
        mk("enc.pool1", Block::Encoder, LayerKind::MaxPool, [half, half, c16]),
        mk(
            "enc.conv2",
            Block::Encoder,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: c16, out_ch: c8, stride: 1 },
            [half, half, c8],
        ),
        mk("dec.up1", Block::Decoder, LayerKind::Upsample, [side, side, c8]),
        mk(
            "dec.conv1",
            Block::Decoder,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: c8, out_ch: 1, stride: 1 },
            [side, side, 1],
        ),
        mk(
            "cls.conv1",
            Block::Classifier,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: c8, out_ch: c8, stride: 1 },
            [half, half, c8],
        ),
        mk(
            "cls.conv2",
            Block::Classifier,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: c8, out_ch: c16, stride: 1 },
            [half, half, c16],
        ),
        mk("cls.pool1", Block::Classifier, LayerKind::MaxPool, [quarter, quarter, c16]),
        mk(
            "cls.conv3",
            Block::Classifier,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: c16, out_ch: c32, stride: 1 },
            [quarter, quarter, c32],
        ),
        mk(
            "cls.conv4",
            Block::Classifier,
            LayerKind::Conv { kh: 3, kw: 3, in_ch: c32, out_ch: c32, stride: 1 },
            [quarter, quarter, c32],
        ),
        mk("cls.pool2", Block::Classifier, LayerKind::MaxPool, [eighth, eighth, c32]),
        mk("cls.flatten", Block::Classifier, LayerKind::Flatten, [1, 1, flat]),
        mk(
            "cls.fc1",
            Block::Classifier,
            LayerKind::Dense { in_dim: flat, out_dim: fc },
            [1, 1, fc],
        ),
        mk("cls.bn", Block::Classifier, LayerKind::BatchNorm { dim: fc }, [1, 1, fc]),
        mk(
            "cls.fc2",
            Block::Classifier,
            LayerKind::Softmax { in_dim: fc, classes },
            [1, 1, classes],
        ),
    ];
    ModelSpec { layers, config }
}

pub fn build_spec() -> ModelSpec {
    build_spec_with(ModelConfig::default())
}

/// Exact stored-parameter count over the given blocks.
pub fn count_params(spec: &ModelSpec, blocks: &[Block]) -> usize {
    spec.layers
        .iter()
        .filter(|l| blocks.contains(&l.block))
        .map(LayerInfo::param_count)
        .sum()
}

/// Seeded fan-in-scaled uniform initialization of all parameters.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x494e4954u64);
    let mut store = WeightStore::new();
    for layer in &spec.layers {
        match layer.kind {
            LayerKind::Conv { kh, kw, in_ch, out_ch, .. } => {
                let fan_in = (kh * kw * in_ch) as f32;
                let bound = 1.0 / fan_in.sqrt();
                let n = kh * kw * in_ch * out_ch;
                let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                store.insert(
                    &format!("{}.w", layer.name),
                    Tensor::new(vec![kh, kw, in_ch, out_ch], data)?,
                );
                store.insert(&format!("{}.b", layer.name), Tensor::zeros(vec![out_ch]));
            }
            LayerKind::Dense { in_dim, out_dim } | LayerKind::Softmax { in_dim, classes: out_dim } => {
                let bound = 1.0 / (in_dim as f32).sqrt();
                let data: Vec<f32> =
                    (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
                store.insert(&format!("{}.w", layer.name), Tensor::new(vec![in_dim, out_dim], data)?);
                store.insert(&format!("{}.b", layer.name), Tensor::zeros(vec![out_dim]));
            }
            LayerKind::BatchNorm { dim } => {
                store.insert(&format!("{}.gamma", layer.name), Tensor::filled(vec![dim], 1.0));
                store.insert(&format!("{}.beta", layer.name), Tensor::zeros(vec![dim]));
                store.insert_buffer(&format!("{}.mean", layer.name), vec![0.0; dim]);
                store.insert_buffer(&format!("{}.var", layer.name), vec![1.0; dim]);
            }
            _ => {}
        }
    }
    Ok(store)
}

/// Runs a symbolic shape trace and checks it against the architecture rows.
pub fn verify_shape_trace(spec: &ModelSpec) -> Result<Vec<(String, [usize; 3])>> {
    let mut trace = Vec::new();
    let mut cur = [IMAGE_SIDE, IMAGE_SIDE, 1usize];
    let mut enc_out = cur;
    for layer in &spec.layers {
        if layer.block == Block::Classifier && layer.name == "cls.conv1" {
            cur = enc_out; // the classifier consumes the encoder feature map
        }
        match layer.kind {
            LayerKind::Input => {}
            LayerKind::Conv { out_ch, stride, .. } => {
                cur = [cur[0].div_ceil(stride), cur[1].div_ceil(stride), out_ch];
            }
            LayerKind::MaxPool => cur = [cur[0] / 2, cur[1] / 2, cur[2]],
            LayerKind::Upsample => cur = [cur[0] * 2, cur[1] * 2, cur[2]],
            LayerKind::Flatten => cur = [1, 1, cur[0] * cur[1] * cur[2]],
            LayerKind::Dense { out_dim, .. } => cur = [1, 1, out_dim],
            LayerKind::BatchNorm { dim } => cur = [1, 1, dim],
            LayerKind::Softmax { classes, .. } => cur = [1, 1, classes],
        }
        if cur != layer.output {
            return Err(Error::Shape {
                op: "shape_trace",
                detail: format!("{}: traced {:?}, declared {:?}", layer.name, cur, layer.output),
            });
        }
        if layer.name == "enc.conv2" {
            enc_out = cur;
        }
        trace.push((layer.name.clone(), cur));
    }
    let _ = IMAGE_PIXELS;
    Ok(trace)
}
