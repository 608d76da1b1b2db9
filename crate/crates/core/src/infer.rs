//! Graph-free single-sample inference engine.
//!
//! Built once from a weight store, it packs away dead conv channels (zero
//! filter + zero bias, as produced by filter pruning) and the dense rows
//! they feed, so pruned models do strictly less arithmetic. Weights-and-
//! activations models quantize each post-ReLU tensor with the calibrated
//! ranges. Runs single-threaded; callers parallelize across samples.

use crate::dataset::{to_image, IMAGE_SIDE, NUM_APS};
use crate::error::{Error, Result};
use crate::model::forward::BN_EPS;
use crate::model::weights::WeightStore;
use crate::tensor::kernels::fake_quant_unsigned;
use std::collections::BTreeMap;

struct PackedConv {
    site: String,
    /// [kh, kw, live_in, live_out] row-major.
    kernel: Vec<f32>,
    bias: Vec<f32>,
    kh: usize,
    kw: usize,
    live_in: usize,
    live_out: usize,
}

struct PackedDense {
    site: Option<String>,
    /// [live_in, out] row-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
    live_in: usize,
    out: usize,
}

struct BatchNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

pub struct InferModel {
    convs: Vec<(PackedConv, bool)>, // (layer, followed by 2x2 maxpool)
    fc1: PackedDense,
    bn: BatchNorm,
    fc2: PackedDense,
    act_quant: Option<(u8, BTreeMap<String, f32>)>,
    classes: usize,
    model_hash: u64,
}

/// Channels whose filter and bias are entirely zero never produce output.
fn live_channels(kernel: &[f32], bias: &[f32], cin_live: &[usize], cin: usize, cout: usize, kh: usize, kw: usize) -> Vec<usize> {
    (0..cout)
        .filter(|&co| {
            if bias[co] != 0.0 {
                return true;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    for &ci in cin_live {
                        if kernel[((ky * kw + kx) * cin + ci) * cout + co] != 0.0 {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .collect()
}

fn pack_conv(
    store: &WeightStore,
    layer: &str,
    cin: usize,
    cout: usize,
    cin_live: &[usize],
) -> Result<(PackedConv, Vec<usize>)> {
    let kernel = store.tensor(&format!("{layer}.w"))?;
    let bias = store.tensor(&format!("{layer}.b"))?;
    let (kh, kw) = (kernel.dim(0), kernel.dim(1));
    if kernel.dim(2) != cin || kernel.dim(3) != cout {
        return Err(Error::Shape {
            op: "infer_pack",
            detail: format!("{layer}: kernel {:?} vs expected [{kh},{kw},{cin},{cout}]", kernel.shape()),
        });
    }
    let out_live = live_channels(kernel.data(), bias.data(), cin_live, cin, cout, kh, kw);
    let mut packed = vec![0.0f32; kh * kw * cin_live.len() * out_live.len()];
    for ky in 0..kh {
        for kx in 0..kw {
            for (pi, &ci) in cin_live.iter().enumerate() {
                for (po, &co) in out_live.iter().enumerate() {
                    packed[((ky * kw + kx) * cin_live.len() + pi) * out_live.len() + po] =
                        kernel.data()[((ky * kw + kx) * cin + ci) * cout + co];
                }
            }
        }
    }
    let packed_bias: Vec<f32> = out_live.iter().map(|&co| bias.data()[co]).collect();
    Ok((
        PackedConv {
            site: layer.to_string(),
            kernel: packed,
            bias: packed_bias,
            kh,
            kw,
            live_in: cin_live.len(),
            live_out: out_live.len(),
        },
        out_live,
    ))
}

impl InferModel {
    /// Builds the packed engine from a deployed store (encoder+classifier).
    /// `act_quant` supplies WA bit width and per-site ranges.
    pub fn from_store(
        store: &WeightStore,
        act_quant: Option<(u8, &BTreeMap<String, f32>)>,
    ) -> Result<Self> {
        // Conv sequence of the deployed model; true marks a following pool.
        let plan: [(&str, bool); 6] = [
            ("enc.conv1", true),
            ("enc.conv2", false),
            ("cls.conv1", false),
            ("cls.conv2", true),
            ("cls.conv3", false),
            ("cls.conv4", true),
        ];
        let mut convs = Vec::with_capacity(plan.len());
        let mut live: Vec<usize> = vec![0]; // the input image's single channel
        for (layer, pooled) in plan {
            let kernel = store.tensor(&format!("{layer}.w"))?;
            let (cin, cout) = (kernel.dim(2), kernel.dim(3));
            let (packed, out_live) = pack_conv(store, layer, cin, cout, &live)?;
            convs.push((packed, pooled));
            live = out_live;
        }

        // fc1 consumes the flatten of the final conv map; keep only rows fed
        // by live channels. Feature index = (y * w + x) * c_full + channel.
        let fc1w = store.tensor("cls.fc1.w")?;
        let fc1b = store.tensor("cls.fc1.b")?;
        let c_full = store.tensor("cls.conv4.w")?.dim(3);
        let spatial = fc1w.dim(0) / c_full;
        let fc_out = fc1w.dim(1);
        let mut rows = Vec::with_capacity(spatial * live.len());
        for s in 0..spatial {
            for &c in &live {
                rows.push(s * c_full + c);
            }
        }
        let mut fc1_packed = vec![0.0f32; rows.len() * fc_out];
        for (pi, &row) in rows.iter().enumerate() {
            fc1_packed[pi * fc_out..(pi + 1) * fc_out]
                .copy_from_slice(&fc1w.data()[row * fc_out..(row + 1) * fc_out]);
        }
        let fc1 = PackedDense {
            site: Some("cls.fc1".into()),
            weights: fc1_packed,
            bias: fc1b.data().to_vec(),
            live_in: rows.len(),
            out: fc_out,
        };

        let gamma = store.tensor("cls.bn.gamma")?.data().to_vec();
        let beta = store.tensor("cls.bn.beta")?.data().to_vec();
        let mean = store.buffer("cls.bn.mean")?.to_vec();
        let inv_std: Vec<f32> =
            store.buffer("cls.bn.var")?.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let bn = BatchNorm { gamma, beta, mean, inv_std };

        let fc2w = store.tensor("cls.fc2.w")?;
        let fc2b = store.tensor("cls.fc2.b")?;
        let classes = fc2w.dim(1);
        let fc2 = PackedDense {
            site: None,
            weights: fc2w.data().to_vec(),
            bias: fc2b.data().to_vec(),
            live_in: fc2w.dim(0),
            out: classes,
        };

        Ok(InferModel {
            convs,
            fc1,
            bn,
            fc2,
            act_quant: act_quant.map(|(b, r)| (b, r.clone())),
            classes,
            model_hash: store.content_hash(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn model_hash(&self) -> u64 {
        self.model_hash
    }

    fn quantize_site(&self, site: &str, values: &mut [f32]) {
        if let Some((bits, ranges)) = &self.act_quant {
            let range = ranges.get(site).copied().unwrap_or(1.0).max(f32::MIN_POSITIVE);
            let q = fake_quant_unsigned(values, range, *bits);
            values.copy_from_slice(&q);
        }
    }

    /// Same-padding conv + ReLU (+ optional activation quantization).
    fn conv(&self, layer: &PackedConv, input: &[f32], h: usize, w: usize) -> Vec<f32> {
        let (cin, cout) = (layer.live_in, layer.live_out);
        let mut out = vec![0.0f32; h * w * cout];
        let pad_y = (layer.kh - 1) / 2;
        let pad_x = (layer.kw - 1) / 2;
        let mut acc = vec![0.0f32; cout];
        for oy in 0..h {
            for ox in 0..w {
                acc.copy_from_slice(&layer.bias);
                for ky in 0..layer.kh {
                    let iy = oy as isize + ky as isize - pad_y as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..layer.kw {
                        let ix = ox as isize + kx as isize - pad_x as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &input[((iy as usize) * w + ix as usize) * cin..][..cin];
                        let kbase = (ky * layer.kw + kx) * cin;
                        for (ci, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &layer.kernel[(kbase + ci) * cout..][..cout];
                            for (a, &k) in acc.iter_mut().zip(krow) {
                                *a += v * k;
                            }
                        }
                    }
                }
                let dst = &mut out[(oy * w + ox) * cout..][..cout];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = a.max(0.0);
                }
            }
        }
        self.quantize_site(&layer.site, &mut out);
        out
    }

    fn pool(input: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = input[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = best;
                }
            }
        }
        out
    }

    /// Logits for one 24x24 image (flattened, 576 values).
    pub fn logits_image(&self, pixels: &[f32]) -> Result<Vec<f32>> {
        if pixels.len() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(Error::Shape {
                op: "infer",
                detail: format!("expected {} pixels, got {}", IMAGE_SIDE * IMAGE_SIDE, pixels.len()),
            });
        }
        let mut feat = pixels.to_vec();
        let (mut h, mut w) = (IMAGE_SIDE, IMAGE_SIDE);
        for (conv, pooled) in &self.convs {
            feat = self.conv(conv, &feat, h, w);
            if *pooled {
                feat = Self::pool(&feat, h, w, conv.live_out);
                h /= 2;
                w /= 2;
            }
        }

        // fc1 over live features + ReLU (+ quant), then batch norm, then fc2.
        debug_assert_eq!(feat.len(), self.fc1.live_in);
        let mut hidden = self.fc1.bias.clone();
        for (i, &v) in feat.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &self.fc1.weights[i * self.fc1.out..][..self.fc1.out];
            for (a, &k) in hidden.iter_mut().zip(row) {
                *a += v * k;
            }
        }
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        if let Some(site) = &self.fc1.site {
            self.quantize_site(site, &mut hidden);
        }
        for (j, v) in hidden.iter_mut().enumerate() {
            *v = self.bn.gamma[j] * (*v - self.bn.mean[j]) * self.bn.inv_std[j] + self.bn.beta[j];
        }

        let mut logits = self.fc2.bias.clone();
        for (i, &v) in hidden.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &self.fc2.weights[i * self.fc2.out..][..self.fc2.out];
            for (a, &k) in logits.iter_mut().zip(row) {
                *a += v * k;
            }
        }
        Ok(logits)
    }

    /// Class probabilities and top-1 class for one image.
    pub fn predict_image(&self, pixels: &[f32]) -> Result<(Vec<f32>, usize)> {
        let logits = self.logits_image(pixels)?;
        let probs = crate::tensor::kernels::softmax_rows(&logits, 1, self.classes);
        let top1 = crate::model::train::argmax_rows(&probs, self.classes)[0];
        Ok((probs, top1))
    }

    /// Full online-phase prediction for one normalized RSSI fingerprint,
    /// including the vector-to-image encoding.
    pub fn predict_fingerprint(&self, rssi: &[f32]) -> Result<(Vec<f32>, usize)> {
        if rssi.len() != NUM_APS {
            return Err(Error::Shape {
                op: "infer",
                detail: format!("expected {NUM_APS} RSSI values, got {}", rssi.len()),
            });
        }
        let image = to_image(rssi)?;
        self.predict_image(&image.pixels)
    }
}
