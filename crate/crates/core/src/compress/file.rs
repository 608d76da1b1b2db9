//! Versioned container for compressed models.
//!
//! Sections: magic/version, config echo, descriptor tables (tensor shapes,
//! encodings, survivor counts, mask bitmaps), then a contiguous payload
//! whose byte length equals `footprint_estimate(..).total_bytes`, then an
//! FNV-1a trailer. Code streams are little-endian bit-packed, padded to a
//! byte boundary per stream.

use super::footprint::{tensor_encoding, Encoding};
use super::prune::PruneMask;
use super::quant::{
    index_bits, pack_codes, pack_indices, unpack_codes, unpack_indices, QuantizedTensor,
};
use super::{CompressedModel, CompressionConfig, PruneKind, QuantMode};
use crate::error::{Error, Result};
use crate::io_util::{HashReader, HashWriter};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FPQ1";
const VERSION: u32 = 1;

fn mode_code(m: QuantMode) -> u8 {
    match m {
        QuantMode::Wo => 0,
        QuantMode::Wa => 1,
        QuantMode::Nq => 2,
    }
}

fn mode_from(c: u8) -> Result<QuantMode> {
    Ok(match c {
        0 => QuantMode::Wo,
        1 => QuantMode::Wa,
        2 => QuantMode::Nq,
        _ => return Err(Error::Format(format!("unknown quant mode code {c}"))),
    })
}

fn prune_code(p: PruneKind) -> u8 {
    match p {
        PruneKind::Connection => 0,
        PruneKind::Filter => 1,
        PruneKind::ConnectionFilter => 2,
    }
}

fn prune_from(c: u8) -> Result<PruneKind> {
    Ok(match c {
        0 => PruneKind::Connection,
        1 => PruneKind::Filter,
        2 => PruneKind::ConnectionFilter,
        _ => return Err(Error::Format(format!("unknown prune kind code {c}"))),
    })
}

fn pack_bitmap(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bitmap(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

fn survivor_indices(mask: &[bool]) -> Vec<u32> {
    mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i as u32).collect()
}

struct Plan {
    encoding: Encoding,
    survivors: usize,
}

fn plan_for(model: &CompressedModel, name: &str, numel: usize, bits: u8) -> Plan {
    let survivors = model
        .masks
        .weights
        .get(name)
        .map(|m| m.iter().filter(|&&k| k).count())
        .unwrap_or(numel);
    let (encoding, _) = tensor_encoding(numel, survivors, bits);
    Plan { encoding, survivors }
}

/// Writes the container; returns the payload byte count (which equals the
/// footprint estimate for the same model).
pub fn save(model: &CompressedModel, path: &Path) -> Result<u64> {
    let mut w = HashWriter::new(BufWriter::new(File::create(path)?));
    w.write_bytes(MAGIC)?;
    w.write_u32(VERSION)?;
    w.write_u8(model.config.bits)?;
    w.write_u8(mode_code(model.config.mode))?;
    w.write_f32(model.config.sparsity)?;
    w.write_u8(model.config.qat as u8)?;
    w.write_u8(prune_code(model.config.prune_kind))?;
    w.write_u64(model.seed)?;
    w.write_u64(model.base_hash)?;
    w.write_u64(model.catalog_hash)?;

    // Descriptor tables.
    w.write_u32(model.quantized.len() as u32)?;
    for q in &model.quantized {
        let plan = plan_for(model, &q.name, q.numel(), q.bits);
        w.write_str(&q.name)?;
        w.write_u32(q.shape.len() as u32)?;
        for &d in &q.shape {
            w.write_u32(d as u32)?;
        }
        w.write_u32(q.scales.len() as u32)?;
        w.write_u8(matches!(plan.encoding, Encoding::Sparse) as u8)?;
        w.write_u32(plan.survivors as u32)?;
    }
    w.write_u32(model.weights_fp32.len() as u32)?;
    for (name, t) in &model.weights_fp32 {
        let plan = plan_for(model, name, t.numel(), 32);
        w.write_str(name)?;
        w.write_u32(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u32(d as u32)?;
        }
        w.write_u8(matches!(plan.encoding, Encoding::Sparse) as u8)?;
        w.write_u32(plan.survivors as u32)?;
    }
    w.write_u32(model.fixed.len() as u32)?;
    for (name, t) in &model.fixed {
        w.write_str(name)?;
        w.write_u32(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u32(d as u32)?;
        }
    }
    w.write_u32(model.buffers.len() as u32)?;
    for (name, b) in &model.buffers {
        w.write_str(name)?;
        w.write_u32(b.len() as u32)?;
    }
    w.write_u32(model.act_ranges.len() as u32)?;
    for name in model.act_ranges.keys() {
        w.write_str(name)?;
    }
    // Mask bitmaps (metadata: retained for fine-tuning continuation; the
    // payload's sparse streams carry the inference-relevant zeros).
    w.write_u32(model.masks.weights.len() as u32)?;
    for (name, mask) in &model.masks.weights {
        w.write_str(name)?;
        w.write_u32(mask.len() as u32)?;
        w.write_bytes(&pack_bitmap(mask))?;
    }
    w.write_u32(model.masks.biases.len() as u32)?;
    for (name, mask) in &model.masks.biases {
        w.write_str(name)?;
        w.write_u32(mask.len() as u32)?;
        w.write_bytes(&pack_bitmap(mask))?;
    }

    // Payload.
    let mut payload: Vec<u8> = Vec::new();
    for q in &model.quantized {
        for s in &q.scales {
            payload.extend_from_slice(&s.to_le_bytes());
        }
        let plan = plan_for(model, &q.name, q.numel(), q.bits);
        match plan.encoding {
            Encoding::Dense => payload.extend_from_slice(&pack_codes(&q.codes, q.bits)),
            Encoding::Sparse => {
                let mask = &model.masks.weights[&q.name];
                let idxs = survivor_indices(mask);
                let codes: Vec<i32> = idxs.iter().map(|&i| q.codes[i as usize]).collect();
                payload.extend_from_slice(&pack_indices(&idxs, index_bits(q.numel())));
                payload.extend_from_slice(&pack_codes(&codes, q.bits));
            }
        }
    }
    for (name, t) in &model.weights_fp32 {
        let plan = plan_for(model, name, t.numel(), 32);
        match plan.encoding {
            Encoding::Dense => {
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Encoding::Sparse => {
                let mask = &model.masks.weights[name];
                let idxs = survivor_indices(mask);
                payload.extend_from_slice(&pack_indices(&idxs, index_bits(t.numel())));
                for &i in &idxs {
                    payload.extend_from_slice(&t.data()[i as usize].to_le_bytes());
                }
            }
        }
    }
    for t in model.fixed.values() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in model.buffers.values() {
        for v in b {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for r in model.act_ranges.values() {
        payload.extend_from_slice(&r.to_le_bytes());
    }

    let payload_len = payload.len() as u64;
    w.write_u64(payload_len)?;
    w.write_bytes(&payload)?;
    w.finish()?;
    Ok(payload_len)
}

pub fn load(path: &Path) -> Result<CompressedModel> {
    let mut r = HashReader::new(BufReader::new(File::open(path)?))?;
    let magic = r.read_bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format("not a compressed model file (bad magic)".into()));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported compressed model version {version}")));
    }
    let config = CompressionConfig {
        bits: r.read_u8()?,
        mode: mode_from(r.read_u8()?)?,
        sparsity: r.read_f32()?,
        qat: r.read_u8()? != 0,
        prune_kind: prune_from(r.read_u8()?)?,
    };
    let seed = r.read_u64()?;
    let base_hash = r.read_u64()?;
    let catalog_hash = r.read_u64()?;

    struct QDesc {
        name: String,
        shape: Vec<usize>,
        scales_len: usize,
        sparse: bool,
        survivors: usize,
    }
    let n_quant = r.read_u32()? as usize;
    let mut qdescs = Vec::with_capacity(n_quant);
    for _ in 0..n_quant {
        let name = r.read_str()?;
        let ndim = r.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32()? as usize);
        }
        let scales_len = r.read_u32()? as usize;
        let sparse = r.read_u8()? != 0;
        let survivors = r.read_u32()? as usize;
        qdescs.push(QDesc { name, shape, scales_len, sparse, survivors });
    }
    let n_fp32 = r.read_u32()? as usize;
    let mut fdescs = Vec::with_capacity(n_fp32);
    for _ in 0..n_fp32 {
        let name = r.read_str()?;
        let ndim = r.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32()? as usize);
        }
        let sparse = r.read_u8()? != 0;
        let survivors = r.read_u32()? as usize;
        fdescs.push((name, shape, sparse, survivors));
    }
    let n_fixed = r.read_u32()? as usize;
    let mut fixed_descs = Vec::with_capacity(n_fixed);
    for _ in 0..n_fixed {
        let name = r.read_str()?;
        let ndim = r.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32()? as usize);
        }
        fixed_descs.push((name, shape));
    }
    let n_buffers = r.read_u32()? as usize;
    let mut buffer_descs = Vec::with_capacity(n_buffers);
    for _ in 0..n_buffers {
        let name = r.read_str()?;
        let len = r.read_u32()? as usize;
        buffer_descs.push((name, len));
    }
    let n_ranges = r.read_u32()? as usize;
    let mut range_names = Vec::with_capacity(n_ranges);
    for _ in 0..n_ranges {
        range_names.push(r.read_str()?);
    }
    let mut masks = PruneMask::default();
    let n_wmasks = r.read_u32()? as usize;
    for _ in 0..n_wmasks {
        let name = r.read_str()?;
        let len = r.read_u32()? as usize;
        let bytes = r.read_bytes(len.div_ceil(8))?;
        masks.weights.insert(name, unpack_bitmap(&bytes, len));
    }
    let n_bmasks = r.read_u32()? as usize;
    for _ in 0..n_bmasks {
        let name = r.read_str()?;
        let len = r.read_u32()? as usize;
        let bytes = r.read_bytes(len.div_ceil(8))?;
        masks.biases.insert(name, unpack_bitmap(&bytes, len));
    }

    let payload_len = r.read_u64()? as usize;
    if r.remaining() != payload_len {
        return Err(Error::Format(format!(
            "payload length mismatch: declared {payload_len}, present {}",
            r.remaining()
        )));
    }

    let mut quantized = Vec::with_capacity(qdescs.len());
    for d in qdescs {
        let numel: usize = d.shape.iter().product();
        let scales = r.read_f32_vec(d.scales_len)?;
        let codes = if d.sparse {
            let idx_bytes = r.read_bytes((d.survivors * index_bits(numel) as usize).div_ceil(8))?;
            let idxs = unpack_indices(&idx_bytes, index_bits(numel), d.survivors)?;
            let code_bytes = r.read_bytes((d.survivors * config.bits as usize).div_ceil(8))?;
            let vals = unpack_codes(&code_bytes, config.bits, d.survivors)?;
            let mut codes = vec![0i32; numel];
            for (&i, &v) in idxs.iter().zip(&vals) {
                codes[i as usize] = v;
            }
            codes
        } else {
            let bytes = r.read_bytes((numel * config.bits as usize).div_ceil(8))?;
            unpack_codes(&bytes, config.bits, numel)?
        };
        quantized.push(QuantizedTensor { name: d.name, shape: d.shape, bits: config.bits, scales, codes });
    }
    let mut weights_fp32 = BTreeMap::new();
    for (name, shape, sparse, survivors) in fdescs {
        let numel: usize = shape.iter().product();
        let data = if sparse {
            let idx_bytes = r.read_bytes((survivors * index_bits(numel) as usize).div_ceil(8))?;
            let idxs = unpack_indices(&idx_bytes, index_bits(numel), survivors)?;
            let vals = r.read_f32_vec(survivors)?;
            let mut data = vec![0.0f32; numel];
            for (&i, &v) in idxs.iter().zip(&vals) {
                data[i as usize] = v;
            }
            data
        } else {
            r.read_f32_vec(numel)?
        };
        weights_fp32.insert(name, Tensor::new(shape, data)?);
    }
    let mut fixed = BTreeMap::new();
    for (name, shape) in fixed_descs {
        let numel: usize = shape.iter().product();
        fixed.insert(name, Tensor::new(shape, r.read_f32_vec(numel)?)?);
    }
    let mut buffers = BTreeMap::new();
    for (name, len) in buffer_descs {
        buffers.insert(name, r.read_f32_vec(len)?);
    }
    let mut act_ranges = BTreeMap::new();
    for name in range_names {
        let v = r.read_f32()?;
        act_ranges.insert(name, v);
    }

    Ok(CompressedModel {
        config,
        seed,
        quantized,
        weights_fp32,
        fixed,
        buffers,
        masks,
        act_ranges,
        base_hash,
        catalog_hash,
        train_log: None,
    })
}
