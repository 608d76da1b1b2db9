//! Deterministic byte accounting for compressed models.
//!
//! Formula (v1), equal by construction to the container's payload size:
//!   - each weight tensor is stored dense (numel x bits, byte-padded) or
//!     sparse (survivors x ceil(log2(numel)) index bits + survivors x bits,
//!     each byte-padded), whichever is smaller; sparse applies only when the
//!     tensor actually has pruned positions
//!   - quantized tensors add a 32-bit scale per output channel
//!   - biases and batch-norm parameters/statistics stay at 32 bits each
//!   - weights+activations mode adds one 32-bit range per activation site

use super::quant::{index_bits, packed_bytes};
use super::CompressedModel;
use serde::Serialize;

pub const FOOTPRINT_FORMULA: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Encoding {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorFootprint {
    pub name: String,
    pub numel: usize,
    pub survivors: usize,
    pub bits: u8,
    pub encoding: Encoding,
    pub code_bytes: usize,
    pub scale_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FootprintReport {
    pub formula: &'static str,
    pub config_label: String,
    pub tensors: Vec<TensorFootprint>,
    pub fixed_bytes: usize,
    pub range_bytes: usize,
    pub total_bytes: usize,
}

/// Chooses the cheaper of dense and sparse storage for one tensor.
pub fn tensor_encoding(numel: usize, survivors: usize, bits: u8) -> (Encoding, usize) {
    let dense = packed_bytes(numel, bits as u32);
    if survivors == numel {
        return (Encoding::Dense, dense);
    }
    let idx = index_bits(numel);
    let sparse = packed_bytes(survivors, idx) + packed_bytes(survivors, bits as u32);
    if sparse < dense {
        (Encoding::Sparse, sparse)
    } else {
        (Encoding::Dense, dense)
    }
}

fn survivors_of(model: &CompressedModel, name: &str, numel: usize) -> usize {
    model
        .masks
        .weights
        .get(name)
        .map(|m| m.iter().filter(|&&k| k).count())
        .unwrap_or(numel)
}

pub fn footprint_estimate(model: &CompressedModel) -> FootprintReport {
    let mut tensors = Vec::new();
    for q in &model.quantized {
        let survivors = survivors_of(model, &q.name, q.numel());
        let (encoding, code_bytes) = tensor_encoding(q.numel(), survivors, q.bits);
        tensors.push(TensorFootprint {
            name: q.name.clone(),
            numel: q.numel(),
            survivors,
            bits: q.bits,
            encoding,
            code_bytes,
            scale_bytes: 4 * q.scales.len(),
        });
    }
    for (name, t) in &model.weights_fp32 {
        let survivors = survivors_of(model, name, t.numel());
        let (encoding, code_bytes) = tensor_encoding(t.numel(), survivors, 32);
        tensors.push(TensorFootprint {
            name: name.clone(),
            numel: t.numel(),
            survivors,
            bits: 32,
            encoding,
            code_bytes,
            scale_bytes: 0,
        });
    }
    let fixed_bytes: usize = model.fixed.values().map(|t| 4 * t.numel()).sum::<usize>()
        + model.buffers.values().map(|b| 4 * b.len()).sum::<usize>();
    let range_bytes = 4 * model.act_ranges.len();
    let total_bytes = tensors.iter().map(|t| t.code_bytes + t.scale_bytes).sum::<usize>()
        + fixed_bytes
        + range_bytes;
    FootprintReport {
        formula: FOOTPRINT_FORMULA,
        config_label: model.config.label(),
        tensors,
        fixed_bytes,
        range_bytes,
        total_bytes,
    }
}
