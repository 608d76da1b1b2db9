//! Magnitude-based connection pruning and L2-norm filter pruning.

use super::CompressionConfig;
use super::PruneKind;
use crate::error::{Error, Result};
use crate::model::weights::WeightStore;
use crate::model::{Block, LayerKind, ModelSpec};
use std::collections::BTreeMap;

/// Keep-masks per weight tensor (true = keep), plus bias masks from filter
/// pruning.
#[derive(Debug, Clone, Default)]
pub struct PruneMask {
    pub weights: BTreeMap<String, Vec<bool>>,
    pub biases: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn identity(store: &WeightStore, names: &[String]) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for n in names {
            weights.insert(n.clone(), vec![true; store.tensor(n)?.numel()]);
        }
        Ok(PruneMask { weights, biases: BTreeMap::new() })
    }

    /// Fraction of weight positions masked out, over all covered tensors.
    pub fn global_sparsity(&self) -> f64 {
        let total: usize = self.weights.values().map(Vec::len).sum();
        if total == 0 {
            return 0.0;
        }
        let zeroed: usize = self.weights.values().map(|m| m.iter().filter(|&&k| !k).count()).sum();
        zeroed as f64 / total as f64
    }

    pub fn layer_sparsity(&self, name: &str) -> Option<f64> {
        self.weights.get(name).map(|m| {
            m.iter().filter(|&&k| !k).count() as f64 / m.len() as f64
        })
    }

    /// Zeroes masked weights (and filter-pruned biases) in the store.
    pub fn apply(&self, store: &mut WeightStore) -> Result<()> {
        store.apply_masks(&self.weights)?;
        store.apply_masks(&self.biases)
    }

    /// Merged mask map for the training loop (gradient + value enforcement).
    pub fn as_train_masks(&self) -> BTreeMap<String, Vec<bool>> {
        let mut all = self.weights.clone();
        for (k, v) in &self.biases {
            all.insert(k.clone(), v.clone());
        }
        all
    }
}

/// Names of the weight tensors subject to pruning and quantization: conv and
/// dense weights of the deployed blocks (encoder + classifier); biases and
/// batch norm stay full precision.
pub fn prunable_weights(spec: &ModelSpec) -> Vec<String> {
    spec.layers
        .iter()
        .filter(|l| l.block != Block::Decoder)
        .filter(|l| {
            matches!(
                l.kind,
                LayerKind::Conv { .. } | LayerKind::Dense { .. } | LayerKind::Softmax { .. }
            )
        })
        .map(|l| format!("{}.w", l.name))
        .collect()
}

/// Conv layers of the deployed blocks, with their output-channel counts.
fn deployed_convs(spec: &ModelSpec) -> Vec<(String, usize)> {
    spec.layers
        .iter()
        .filter(|l| l.block != Block::Decoder)
        .filter_map(|l| match l.kind {
            LayerKind::Conv { out_ch, .. } => Some((l.name.clone(), out_ch)),
            _ => None,
        })
        .collect()
}

/// Global magnitude ranking: the smallest floor(S*N) weights across all
/// prunable tensors are masked out. Ties break on (tensor, index) order so
/// the achieved count is exact.
pub fn prune_connections(
    store: &WeightStore,
    names: &[String],
    sparsity: f64,
    base: Option<&PruneMask>,
) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity must be in [0,1), got {sparsity}")));
    }
    let mut mask = match base {
        Some(b) => b.clone(),
        None => PruneMask::identity(store, names)?,
    };
    let total: usize = names.iter().map(|n| mask.weights[n].len()).sum();
    let target_zeros = (sparsity * total as f64).floor() as usize;
    let already: usize =
        names.iter().map(|n| mask.weights[n].iter().filter(|&&k| !k).count()).sum();
    if target_zeros <= already {
        return Ok(mask);
    }

    let mut candidates: Vec<(f32, usize, u32)> = Vec::with_capacity(total - already);
    for (ti, name) in names.iter().enumerate() {
        let data = store.tensor(name)?.data();
        let m = &mask.weights[name];
        for (ei, (&v, &keep)) in data.iter().zip(m).enumerate() {
            if keep {
                candidates.push((v.abs(), ti, ei as u32));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, ti, ei) in candidates.iter().take(target_zeros - already) {
        mask.weights.get_mut(&names[ti]).unwrap()[ei as usize] = false;
    }
    Ok(mask)
}

/// Per-conv-layer filter pruning: filters ranked by L2 norm ascending; the
/// lowest-norm filters are zeroed until the layer's zeroed fraction first
/// reaches the target. A layer never loses its last filter; pruned filters
/// zero their bias as well.
pub fn prune_filters(
    store: &WeightStore,
    spec: &ModelSpec,
    fraction: f64,
    names: &[String],
) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("filter fraction must be in [0,1), got {fraction}")));
    }
    let mut mask = PruneMask::identity(store, names)?;
    if fraction == 0.0 {
        return Ok(mask);
    }
    for (layer, out_ch) in deployed_convs(spec) {
        if out_ch <= 1 {
            continue;
        }
        let wname = format!("{layer}.w");
        let tensor = store.tensor(&wname)?;
        let numel = tensor.numel();
        let mut norms: Vec<(f64, usize)> = (0..out_ch)
            .map(|c| {
                let mut acc = 0.0f64;
                let mut i = c;
                while i < numel {
                    let v = tensor.data()[i] as f64;
                    acc += v * v;
                    i += out_ch;
                }
                (acc.sqrt(), c)
            })
            .collect();
        norms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        // Zeroing k of C equal-size filters zeroes k/C of the layer.
        let k = ((fraction * out_ch as f64).ceil() as usize).min(out_ch - 1);
        let weight_mask = mask.weights.get_mut(&wname).unwrap();
        let mut bias_mask = vec![true; out_ch];
        for &(_, c) in norms.iter().take(k) {
            let mut i = c;
            while i < numel {
                weight_mask[i] = false;
                i += out_ch;
            }
            bias_mask[c] = false;
        }
        mask.biases.insert(format!("{layer}.b"), bias_mask);
    }
    Ok(mask)
}

/// Builds the mask for a compression config: connection-only, filter-only,
/// or the combination (filters supply the first half of the target, global
/// connection ranking tops up to the exact global sparsity).
pub fn build_mask(
    store: &WeightStore,
    spec: &ModelSpec,
    cfg: &CompressionConfig,
) -> Result<PruneMask> {
    let names = prunable_weights(spec);
    let s = cfg.sparsity as f64;
    if s == 0.0 {
        return PruneMask::identity(store, &names);
    }
    match cfg.prune_kind {
        PruneKind::Connection => prune_connections(store, &names, s, None),
        PruneKind::Filter => prune_filters(store, spec, s, &names),
        PruneKind::ConnectionFilter => {
            let filtered = prune_filters(store, spec, s / 2.0, &names)?;
            prune_connections(store, &names, s, Some(&filtered))
        }
    }
}
