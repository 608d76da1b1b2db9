//! Forward/backward compute kernels shared by the autodiff graph.
//!
//! Every kernel is a pure function over slices. Reductions run in a fixed
//! serial order per output element, so results are bitwise reproducible
//! regardless of the rayon thread count.

use super::Padding;
use rayon::prelude::*;

/// Minimum work (m*k*n) before matmuls fan out across threads.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let row = |i: usize, crow: &mut [f32]| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
    c
}

/// C[k,n] = A^T * B where A is [m,k], B is [m,n].
pub fn matmul_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    let row = |r: usize, crow: &mut [f32]| {
        for i in 0..m {
            let arv = a[i * k + r];
            if arv == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += arv * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(r, crow)| row(r, crow));
    } else {
        for (r, crow) in c.chunks_mut(n).enumerate() {
            row(r, crow);
        }
    }
    c
}

/// C[m,n] = A * B^T where A is [m,k], B is [n,k].
pub fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let row = |i: usize, crow: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
    c
}

/// Spatial output size and leading pad for one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(input);
            (out, pad_total / 2)
        }
        Padding::Valid => ((input - k) / stride + 1, 0),
    }
}

/// Gathers conv patches into a `[n*oh*ow, kh*kw*cin]` matrix.
fn im2col(
    input: &[f32],
    (n, h, w, cin): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    (pad_h, pad_w): (usize, usize),
) -> Vec<f32> {
    let patch = kh * kw * cin;
    let mut cols = vec![0.0f32; n * oh * ow * patch];
    let per_sample = oh * ow * patch;
    cols.par_chunks_mut(per_sample).enumerate().for_each(|(s, chunk)| {
        let base = s * h * w * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut chunk[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = base + ((iy as usize) * w + ix as usize) * cin;
                        let d = (ky * kw + kx) * cin;
                        dst[d..d + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
            }
        }
    });
    cols
}

/// Scatters patch-space gradients back to input space (transpose of im2col).
fn col2im(
    dcols: &[f32],
    (n, h, w, cin): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    (pad_h, pad_w): (usize, usize),
) -> Vec<f32> {
    let patch = kh * kw * cin;
    let mut dinput = vec![0.0f32; n * h * w * cin];
    let per_sample_in = h * w * cin;
    let per_sample_col = oh * ow * patch;
    dinput.par_chunks_mut(per_sample_in).enumerate().for_each(|(s, dst)| {
        let chunk = &dcols[s * per_sample_col..(s + 1) * per_sample_col];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &chunk[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((iy as usize) * w + ix as usize) * cin;
                        let srco = (ky * kw + kx) * cin;
                        for c in 0..cin {
                            dst[d + c] += src[srco + c];
                        }
                    }
                }
            }
        }
    });
    dinput
}

pub struct ConvForward {
    pub output: Vec<f32>,
    pub out_shape: [usize; 4],
    /// Cached im2col matrix, reused by the backward pass.
    pub cols: Vec<f32>,
}

/// input NHWC, kernel [kh,kw,cin,cout], bias [cout].
pub fn conv2d_forward(
    input: &[f32],
    ishape: [usize; 4],
    kernel: &[f32],
    kshape: [usize; 4],
    bias: &[f32],
    stride: usize,
    padding: Padding,
) -> ConvForward {
    let [n, h, w, cin] = ishape;
    let [kh, kw, _, cout] = kshape;
    let (oh, pad_h) = conv_out_dim(h, kh, stride, padding);
    let (ow, pad_w) = conv_out_dim(w, kw, stride, padding);
    let cols = im2col(input, (n, h, w, cin), (kh, kw), stride, (oh, ow), (pad_h, pad_w));
    let rows = n * oh * ow;
    let patch = kh * kw * cin;
    let mut output = matmul(&cols, kernel, rows, patch, cout);
    output.par_chunks_mut(cout).for_each(|orow| {
        for (o, b) in orow.iter_mut().zip(bias) {
            *o += b;
        }
    });
    ConvForward { output, out_shape: [n, oh, ow, cout], cols }
}

pub struct ConvBackward {
    pub dinput: Option<Vec<f32>>,
    pub dkernel: Vec<f32>,
    pub dbias: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dout: &[f32],
    cols: &[f32],
    ishape: [usize; 4],
    kernel: &[f32],
    kshape: [usize; 4],
    stride: usize,
    padding: Padding,
    need_dinput: bool,
) -> ConvBackward {
    let [n, h, w, cin] = ishape;
    let [kh, kw, _, cout] = kshape;
    let (oh, pad_h) = conv_out_dim(h, kh, stride, padding);
    let (ow, pad_w) = conv_out_dim(w, kw, stride, padding);
    let rows = n * oh * ow;
    let patch = kh * kw * cin;

    let dkernel = matmul_at_b(cols, dout, rows, patch, cout);
    let mut dbias = vec![0.0f32; cout];
    for orow in dout.chunks(cout) {
        for (db, d) in dbias.iter_mut().zip(orow) {
            *db += d;
        }
    }
    let dinput = need_dinput.then(|| {
        let dcols = matmul_a_bt(dout, kernel, rows, cout, patch);
        col2im(&dcols, (n, h, w, cin), (kh, kw), stride, (oh, ow), (pad_h, pad_w))
    });
    ConvBackward { dinput, dkernel, dbias }
}

pub struct PoolForward {
    pub output: Vec<f32>,
    pub out_shape: [usize; 4],
    /// Flat input index of each window max; first index wins ties.
    pub argmax: Vec<u32>,
}

/// 2x2 max pooling with stride 2; spatial dims must be even.
pub fn maxpool2_forward(input: &[f32], ishape: [usize; 4]) -> PoolForward {
    let [n, h, w, c] = ishape;
    let (oh, ow) = (h / 2, w / 2);
    let mut output = vec![0.0f32; n * oh * ow * c];
    let mut argmax = vec![0u32; n * oh * ow * c];
    for s in 0..n {
        let base = s * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = base + ((2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = input[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = base + ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((s * oh + oy) * ow + ox) * c + ch;
                    output[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    PoolForward { output, out_shape: [n, oh, ow, c], argmax }
}

pub fn maxpool2_backward(dout: &[f32], argmax: &[u32], input_numel: usize) -> Vec<f32> {
    let mut dinput = vec![0.0f32; input_numel];
    for (d, &idx) in dout.iter().zip(argmax) {
        dinput[idx as usize] += d;
    }
    dinput
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2_forward(input: &[f32], ishape: [usize; 4]) -> (Vec<f32>, [usize; 4]) {
    let [n, h, w, c] = ishape;
    let (oh, ow) = (h * 2, w * 2);
    let mut output = vec![0.0f32; n * oh * ow * c];
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let src = ((s * h + y) * w + x) * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((s * oh + 2 * y + dy) * ow + 2 * x + dx) * c;
                        output[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    (output, [n, oh, ow, c])
}

/// Sums the four replicated gradients back onto each source pixel.
pub fn upsample2_backward(dout: &[f32], ishape: [usize; 4]) -> Vec<f32> {
    let [n, h, w, c] = ishape;
    let (oh, ow) = (h * 2, w * 2);
    let mut dinput = vec![0.0f32; n * h * w * c];
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst = ((s * h + y) * w + x) * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = ((s * oh + 2 * y + dy) * ow + 2 * x + dx) * c;
                        for ch in 0..c {
                            dinput[dst + ch] += dout[src + ch];
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// out[n,units] = x[n,in] * w[in,units] + b.
pub fn dense_forward(x: &[f32], w: &[f32], b: &[f32], n: usize, in_dim: usize, units: usize) -> Vec<f32> {
    let mut out = matmul(x, w, n, in_dim, units);
    for orow in out.chunks_mut(units) {
        for (o, bv) in orow.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

pub struct DenseBackward {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

pub fn dense_backward(
    dout: &[f32],
    x: &[f32],
    w: &[f32],
    n: usize,
    in_dim: usize,
    units: usize,
    need_dx: bool,
) -> DenseBackward {
    let dw = matmul_at_b(x, dout, n, in_dim, units);
    let mut db = vec![0.0f32; units];
    for orow in dout.chunks(units) {
        for (d, g) in db.iter_mut().zip(orow) {
            *d += g;
        }
    }
    let dx = need_dx.then(|| matmul_a_bt(dout, w, n, units, in_dim));
    DenseBackward { dx, dw, db }
}

pub fn relu_forward(input: &[f32]) -> Vec<f32> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient at 0 is taken as 0.
pub fn relu_backward(dout: &[f32], input: &[f32]) -> Vec<f32> {
    dout.iter().zip(input).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect()
}

pub struct BatchNormForward {
    pub output: Vec<f32>,
    pub batch_mean: Vec<f32>,
    /// Biased (1/N) batch variance.
    pub batch_var: Vec<f32>,
    pub xhat: Vec<f32>,
}

/// Train-mode batch normalization over [n, features].
pub fn batchnorm_train_forward(
    x: &[f32],
    n: usize,
    f: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> BatchNormForward {
    let mut mean = vec![0.0f64; f];
    for row in x.chunks(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; f];
    for row in x.chunks(f) {
        for ((vv, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v as f64 - m;
            *vv += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    let batch_mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let batch_var: Vec<f32> = var.iter().map(|&v| v as f32).collect();
    let inv_std: Vec<f32> = batch_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut output = vec![0.0f32; x.len()];
    for (i, row) in x.chunks(f).enumerate() {
        for j in 0..f {
            let xh = (row[j] - batch_mean[j]) * inv_std[j];
            xhat[i * f + j] = xh;
            output[i * f + j] = gamma[j] * xh + beta[j];
        }
    }
    BatchNormForward { output, batch_mean, batch_var, xhat }
}

pub fn batchnorm_infer_forward(
    x: &[f32],
    f: usize,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Vec<f32> {
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0f32; x.len()];
    for (orow, row) in out.chunks_mut(f).zip(x.chunks(f)) {
        for j in 0..f {
            orow[j] = gamma[j] * (row[j] - mean[j]) * inv_std[j] + beta[j];
        }
    }
    out
}

pub struct BatchNormBackward {
    pub dx: Vec<f32>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

pub fn batchnorm_train_backward(
    dout: &[f32],
    xhat: &[f32],
    batch_var: &[f32],
    gamma: &[f32],
    n: usize,
    f: usize,
    eps: f32,
) -> BatchNormBackward {
    let mut dgamma = vec![0.0f32; f];
    let mut dbeta = vec![0.0f32; f];
    for (drow, xrow) in dout.chunks(f).zip(xhat.chunks(f)) {
        for j in 0..f {
            dgamma[j] += drow[j] * xrow[j];
            dbeta[j] += drow[j];
        }
    }
    // dx = gamma/(N*std) * (N*dy - sum(dy) - xhat * sum(dy*xhat))
    let inv_std: Vec<f32> = batch_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let nf = n as f32;
    let mut dx = vec![0.0f32; dout.len()];
    for i in 0..n {
        for j in 0..f {
            let dy = dout[i * f + j];
            dx[i * f + j] =
                gamma[j] * inv_std[j] / nf * (nf * dy - dbeta[j] - xhat[i * f + j] * dgamma[j]);
        }
    }
    BatchNormBackward { dx, dgamma, dbeta }
}

/// Row-wise softmax with max subtraction; rows sum to 1.
pub fn softmax_rows(logits: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut probs = vec![0.0f32; logits.len()];
    for (prow, lrow) in probs.chunks_mut(c).zip(logits.chunks(c)) {
        let max = lrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (p, &l) in prow.iter_mut().zip(lrow) {
            let e = ((l - max) as f64).exp();
            *p = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for p in prow.iter_mut() {
            *p *= inv;
        }
    }
    debug_assert_eq!(probs.len(), n * c);
    probs
}

pub struct CrossEntropyForward {
    /// Mean loss over the batch, accumulated in f64.
    pub loss: f64,
    pub probs: Vec<f32>,
}

pub fn softmax_cross_entropy_forward(logits: &[f32], labels: &[usize], c: usize) -> CrossEntropyForward {
    let n = labels.len();
    let probs = softmax_rows(logits, n, c);
    let mut loss = 0.0f64;
    for (&label, lrow) in labels.iter().zip(logits.chunks(c)) {
        let max = lrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut lse = 0.0f64;
        for &l in lrow {
            lse += ((l - max) as f64).exp();
        }
        let lse = lse.ln() + max as f64;
        loss += lse - lrow[label] as f64;
    }
    CrossEntropyForward { loss: loss / n as f64, probs }
}

/// dlogits = (softmax - onehot) / N, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward(probs: &[f32], labels: &[usize], c: usize, upstream: f32) -> Vec<f32> {
    let n = labels.len();
    let scale = upstream / n as f32;
    let mut d = probs.to_vec();
    for (i, &label) in labels.iter().enumerate() {
        d[i * c + label] -= 1.0;
    }
    for v in d.iter_mut() {
        *v *= scale;
    }
    d
}

/// Per-output-channel scale = mean(|w|) over the channel, where the channel
/// is the last axis (conv kernels [kh,kw,cin,cout] and dense weights
/// [in,out] both keep the output channel last). All-zero channels fall back
/// to scale 1.0 so the quantizer stays inert on them.
pub fn channel_scales_mean_abs(w: &[f32], channels: usize) -> Vec<f32> {
    let rows = w.len() / channels;
    let mut scales = vec![0.0f64; channels];
    for row in w.chunks(channels) {
        for (s, v) in scales.iter_mut().zip(row) {
            *s += v.abs() as f64;
        }
    }
    scales
        .iter()
        .map(|&s| {
            let m = (s / rows as f64) as f32;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect()
}

/// Signed quantization levels per side for b bits: 2^(b-1) - 1, giving an
/// equal number of positive and negative codes.
pub fn signed_levels(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Symmetric uniform quantizer: normalize by the channel scale, clip to
/// [-1,1], round to one of `signed_levels` steps per side.
pub fn quantize_symmetric(w: &[f32], scales: &[f32], bits: u8) -> Vec<i32> {
    let levels = signed_levels(bits) as f32;
    let channels = scales.len();
    w.iter()
        .enumerate()
        .map(|(i, &v)| {
            let u = (v / scales[i % channels]).clamp(-1.0, 1.0);
            (u * levels).round() as i32
        })
        .collect()
}

pub fn dequantize_symmetric(codes: &[i32], scales: &[f32], bits: u8) -> Vec<f32> {
    let levels = signed_levels(bits) as f32;
    let channels = scales.len();
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f32 / levels * scales[i % channels])
        .collect()
}

/// Quantize-then-dequantize in one pass; the shared kernel behind both
/// post-training quantization and the fake-quant training op.
pub fn fake_quant_symmetric(w: &[f32], scales: &[f32], bits: u8) -> Vec<f32> {
    let levels = signed_levels(bits) as f32;
    let channels = scales.len();
    w.iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = scales[i % channels];
            let u = (v / s).clamp(-1.0, 1.0);
            (u * levels).round() / levels * s
        })
        .collect()
}

/// Unsigned uniform quantizer on [0, range] with 2^b - 1 levels, for
/// post-ReLU activations.
pub fn fake_quant_unsigned(a: &[f32], range: f32, bits: u8) -> Vec<f32> {
    let levels = ((1u32 << bits) - 1) as f32;
    a.iter()
        .map(|&v| {
            let u = (v / range).clamp(0.0, 1.0);
            (u * levels).round() / levels * range
        })
        .collect()
}

/// Mean squared error accumulated in f64.
pub fn mse_forward(output: &[f32], target: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&o, &t) in output.iter().zip(target) {
        let d = (o - t) as f64;
        acc += d * d;
    }
    acc / output.len() as f64
}

/// d/d_output of the mean squared error: 2(output-target)/N.
pub fn mse_backward(output: &[f32], target: &[f32], upstream: f32) -> Vec<f32> {
    let scale = 2.0 * upstream / output.len() as f32;
    output.iter().zip(target).map(|(&o, &t)| scale * (o - t)).collect()
}
