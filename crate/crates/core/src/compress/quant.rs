//! Symmetric per-channel weight quantization, unsigned activation
//! quantization, and the bit-packed code streams used for storage.

use crate::error::{Error, Result};
use crate::tensor::kernels::{
    channel_scales_mean_abs, dequantize_symmetric, quantize_symmetric, signed_levels,
};
use crate::tensor::Tensor;

/// Integer codes plus per-output-channel scales for one weight tensor.
/// Codes stay unpacked in memory; packing is a storage-layer concern.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: u8,
    pub scales: Vec<f32>,
    pub codes: Vec<i32>,
}

/// Mean-|w| channel scales; with a keep-mask, the mean runs over surviving
/// weights only so pruning does not shrink the representable range.
pub fn channel_scales(values: &[f32], channels: usize, mask: Option<&[bool]>) -> Vec<f32> {
    match mask {
        None => channel_scales_mean_abs(values, channels),
        Some(mask) => {
            let mut sums = vec![0.0f64; channels];
            let mut counts = vec![0usize; channels];
            for (i, (&v, &keep)) in values.iter().zip(mask).enumerate() {
                if keep {
                    sums[i % channels] += v.abs() as f64;
                    counts[i % channels] += 1;
                }
            }
            sums.iter()
                .zip(&counts)
                .map(|(&s, &n)| {
                    let m = if n > 0 { (s / n as f64) as f32 } else { 0.0 };
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    }
}

impl QuantizedTensor {
    /// Quantizes a weight tensor with the given per-channel scales.
    pub fn from_weights(name: &str, tensor: &Tensor, bits: u8, scales: Vec<f32>) -> Result<Self> {
        if !matches!(bits, 2 | 4 | 8 | 16) {
            return Err(Error::Config(format!("quantizer bits must be in {{2,4,8,16}}, got {bits}")));
        }
        let channels = *tensor.shape().last().unwrap();
        if scales.len() != channels {
            return Err(Error::Shape {
                op: "quantize_tensor",
                detail: format!("{} scales for {} channels", scales.len(), channels),
            });
        }
        if scales.iter().any(|&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::Config("non-positive quantizer scale".into()));
        }
        let codes = quantize_symmetric(tensor.data(), &scales, bits);
        Ok(QuantizedTensor {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            bits,
            scales,
            codes,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        let data = dequantize_symmetric(&self.codes, &self.scales, self.bits);
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }

    /// Largest representable code magnitude: 2^(bits-1) - 1.
    pub fn level_bound(&self) -> i32 {
        signed_levels(self.bits)
    }
}

/// Unsigned activation quantizer on [0, range] with 2^bits - 1 levels.
pub fn quantize_activations(act: &[f32], range: f32, bits: u8) -> Result<Vec<f32>> {
    if bits < 2 {
        return Err(Error::Config(format!("activation quantizer bits must be >= 2, got {bits}")));
    }
    if range <= 0.0 || range.is_nan() {
        return Err(Error::Config(format!("activation range must be positive, got {range}")));
    }
    Ok(crate::tensor::kernels::fake_quant_unsigned(act, range, bits))
}

/// LSB-first bit stream writer for packed integer codes.
#[derive(Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    pub fn push(&mut self, value: u32, nbits: u32) {
        debug_assert!(nbits <= 32);
        let masked = if nbits == 32 { value as u64 } else { (value as u64) & ((1u64 << nbits) - 1) };
        self.acc |= masked << self.filled;
        self.filled += nbits;
        while self.filled >= 8 {
            self.bytes.push((self.acc & 0xff) as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    /// Pads the tail to a byte boundary and returns the stream.
    pub fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc & 0xff) as u8);
        }
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, acc: 0, filled: 0 }
    }

    pub fn pull(&mut self, nbits: u32) -> Result<u32> {
        while self.filled < nbits {
            let b = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| Error::Format("bit stream exhausted".into()))?;
            self.acc |= (b as u64) << self.filled;
            self.filled += 8;
            self.pos += 1;
        }
        let mask = if nbits == 32 { u64::MAX >> 32 } else { (1u64 << nbits) - 1 };
        let v = (self.acc & mask) as u32;
        self.acc >>= nbits;
        self.filled -= nbits;
        Ok(v)
    }
}

/// Sign-extends an nbits-wide two's-complement value.
fn sign_extend(v: u32, nbits: u32) -> i32 {
    let shift = 32 - nbits;
    ((v << shift) as i32) >> shift
}

/// Packs signed codes at `bits` per code, padded to a byte boundary.
pub fn pack_codes(codes: &[i32], bits: u8) -> Vec<u8> {
    let mut w = BitWriter::default();
    for &c in codes {
        w.push(c as u32, bits as u32);
    }
    w.finish()
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<i32>> {
    let mut r = BitReader::new(bytes);
    (0..count).map(|_| r.pull(bits as u32).map(|v| sign_extend(v, bits as u32))).collect()
}

/// Packs unsigned indices at `nbits` per index, padded to a byte boundary.
pub fn pack_indices(indices: &[u32], nbits: u32) -> Vec<u8> {
    let mut w = BitWriter::default();
    for &i in indices {
        w.push(i, nbits);
    }
    w.finish()
}

pub fn unpack_indices(bytes: &[u8], nbits: u32, count: usize) -> Result<Vec<u32>> {
    let mut r = BitReader::new(bytes);
    (0..count).map(|_| r.pull(nbits)).collect()
}

/// Bits per sparse index for a tensor of `numel` elements.
pub fn index_bits(numel: usize) -> u32 {
    (usize::BITS - (numel.max(2) - 1).leading_zeros()).max(1)
}

/// Byte cost of one packed stream: count * nbits, padded to a byte.
pub fn packed_bytes(count: usize, nbits: u32) -> usize {
    (count * nbits as usize).div_ceil(8)
}
