//! Graph builders wiring the architecture out of the parameter store, with
//! optional fake quantization of weights and activations for
//! quantization-aware passes.

use super::weights::WeightStore;
use crate::error::Result;
use crate::tensor::{Graph, NodeId, Padding};
use std::collections::BTreeMap;

pub const BN_EPS: f32 = 1e-5;
/// EMA momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.9;

/// Post-ReLU activation quantization behaviour during a forward build.
pub enum ActQuant<'a> {
    Off,
    /// Record the per-site max (post-training calibration pass).
    Observe(&'a mut BTreeMap<String, f32>),
    /// Quantize with fixed calibrated ranges (deployed inference).
    Fixed { bits: u8, ranges: &'a BTreeMap<String, f32> },
    /// Quantize with running-max EMA ranges (quantization-aware training).
    Ema { bits: u8, ranges: &'a mut BTreeMap<String, f32>, momentum: f32 },
}

pub struct BuildOpts<'a> {
    /// Batch-norm mode: batch statistics (true) or running statistics.
    pub train_bn: bool,
    /// Fake-quantize conv/dense weights at this bit width.
    pub weight_quant_bits: Option<u8>,
    pub act_quant: ActQuant<'a>,
}

impl Default for BuildOpts<'_> {
    fn default() -> Self {
        Self { train_bn: false, weight_quant_bits: None, act_quant: ActQuant::Off }
    }
}

impl BuildOpts<'_> {
    pub fn infer() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self { train_bn: true, ..Self::default() }
    }
}

/// Parameter leaves inserted into a graph, keyed by store name.
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    /// Inserts every parameter as a leaf; frozen parameters get no gradient.
    pub fn insert_all(g: &mut Graph, store: &WeightStore) -> Self {
        let mut map = BTreeMap::new();
        for (name, p) in store.params() {
            map.insert(name.clone(), g.param(p.tensor.clone(), !p.frozen));
        }
        ParamNodes { map }
    }

    /// Wraps already-inserted leaves (e.g. under a gradient checker that owns
    /// parameter insertion).
    pub fn from_ids(names: &[String], ids: &[NodeId]) -> Self {
        ParamNodes { map: names.iter().cloned().zip(ids.iter().copied()).collect() }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.map[name]
    }
}

/// Batch statistics produced by a train-mode batch-norm layer, for the
/// caller to fold into the running averages.
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

fn weight(g: &mut Graph, nodes: &ParamNodes, name: &str, opts: &BuildOpts) -> Result<NodeId> {
    let raw = nodes.id(name);
    match opts.weight_quant_bits {
        Some(bits) => g.fake_quant_weights(raw, bits),
        None => Ok(raw),
    }
}

/// ReLU followed by the configured activation-quantization behaviour.
fn relu_site(g: &mut Graph, x: NodeId, site: &str, opts: &mut BuildOpts) -> Result<NodeId> {
    let r = g.relu(x);
    match &mut opts.act_quant {
        ActQuant::Off => Ok(r),
        ActQuant::Observe(ranges) => {
            let max = g.value(r).data().iter().cloned().fold(0.0f32, f32::max);
            let e = ranges.entry(site.to_string()).or_insert(0.0);
            *e = e.max(max);
            Ok(r)
        }
        ActQuant::Fixed { bits, ranges } => {
            let range = ranges.get(site).copied().unwrap_or(1.0).max(f32::MIN_POSITIVE);
            g.fake_quant_relu(r, range, *bits)
        }
        ActQuant::Ema { bits, ranges, momentum } => {
            let max = g.value(r).data().iter().cloned().fold(0.0f32, f32::max);
            let e = ranges.entry(site.to_string()).or_insert(max);
            *e = *momentum * *e + (1.0 - *momentum) * max;
            let range = e.max(f32::MIN_POSITIVE);
            g.fake_quant_relu(r, range, *bits)
        }
    }
}

fn conv_block(
    g: &mut Graph,
    nodes: &ParamNodes,
    x: NodeId,
    layer: &str,
    opts: &mut BuildOpts,
) -> Result<NodeId> {
    let w = weight(g, nodes, &format!("{layer}.w"), opts)?;
    let b = nodes.id(&format!("{layer}.b"));
    let c = g.conv2d(x, w, b, 1, Padding::Same)?;
    relu_site(g, c, layer, opts)
}

/// Encoder: conv(16) -> pool -> conv(8), ReLU after each conv.
pub fn encode(g: &mut Graph, nodes: &ParamNodes, x: NodeId, opts: &mut BuildOpts) -> Result<NodeId> {
    let h = conv_block(g, nodes, x, "enc.conv1", opts)?;
    let h = g.maxpool2(h)?;
    conv_block(g, nodes, h, "enc.conv2", opts)
}

/// Decoder: upsample -> conv(1) with ReLU, reconstructing the input image.
/// The decoder is never quantized; it is dropped from the deployed model.
pub fn decode(g: &mut Graph, nodes: &ParamNodes, h: NodeId) -> Result<NodeId> {
    let u = g.upsample2(h)?;
    let w = nodes.id("dec.conv1.w");
    let b = nodes.id("dec.conv1.b");
    let c = g.conv2d(u, w, b, 1, Padding::Same)?;
    Ok(g.relu(c))
}

/// Classifier head over the encoder feature map; returns logits plus batch
/// statistics when batch norm ran in train mode.
pub fn classify(
    g: &mut Graph,
    nodes: &ParamNodes,
    store: &WeightStore,
    h: NodeId,
    opts: &mut BuildOpts,
) -> Result<(NodeId, Option<BnBatchStats>)> {
    let h = conv_block(g, nodes, h, "cls.conv1", opts)?;
    let h = conv_block(g, nodes, h, "cls.conv2", opts)?;
    let h = g.maxpool2(h)?;
    let h = conv_block(g, nodes, h, "cls.conv3", opts)?;
    let h = conv_block(g, nodes, h, "cls.conv4", opts)?;
    let h = g.maxpool2(h)?;
    let f = g.flatten(h)?;

    let w1 = weight(g, nodes, "cls.fc1.w", opts)?;
    let b1 = nodes.id("cls.fc1.b");
    let d1 = g.dense(f, w1, b1)?;
    let d1 = relu_site(g, d1, "cls.fc1", opts)?;

    let gamma = nodes.id("cls.bn.gamma");
    let beta = nodes.id("cls.bn.beta");
    let (bn, stats) = if opts.train_bn {
        let (bn, mean, var) = g.batchnorm_train(d1, gamma, beta, BN_EPS)?;
        (bn, Some(BnBatchStats { mean, var }))
    } else {
        let bn = g.batchnorm_infer(
            d1,
            gamma,
            beta,
            store.buffer("cls.bn.mean")?,
            store.buffer("cls.bn.var")?,
            BN_EPS,
        )?;
        (bn, None)
    };

    let w2 = weight(g, nodes, "cls.fc2.w", opts)?;
    let b2 = nodes.id("cls.fc2.b");
    let logits = g.dense(bn, w2, b2)?;
    Ok((logits, stats))
}

/// Full classification forward (encoder + head) for a batch of images.
pub fn classify_images(
    g: &mut Graph,
    store: &WeightStore,
    images: crate::tensor::Tensor,
    opts: &mut BuildOpts,
) -> Result<(NodeId, ParamNodes, Option<BnBatchStats>)> {
    let nodes = ParamNodes::insert_all(g, store);
    let x = g.input(images);
    let h = encode(g, &nodes, x, opts)?;
    let (logits, stats) = classify(g, &nodes, store, h, opts)?;
    Ok((logits, nodes, stats))
}
