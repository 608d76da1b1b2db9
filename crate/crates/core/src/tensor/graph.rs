//! Tape-based reverse-mode autodiff.
//!
//! Values are computed eagerly as nodes are appended, so the node list is
//! already a topological order; `backward` walks it once in reverse.

use super::kernels as k;
use super::{check_finite, Padding, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
        cols: Vec<f32>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: NodeId,
    },
    Flatten {
        x: NodeId,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
        xhat: Vec<f32>,
        batch_var: Vec<f32>,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        inv_std: Vec<f32>,
        mean: Vec<f32>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
        loss: f64,
    },
    MseLoss {
        output: NodeId,
        target: NodeId,
        loss: f64,
    },
    FakeQuantWeights {
        x: NodeId,
        scales: Vec<f32>,
    },
    FakeQuantRelu {
        x: NodeId,
        range: f32,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// One forward/backward tape. Build a fresh graph per training step.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-differentiable input (images, targets).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Parameter leaf; pass `requires_grad = false` for frozen parameters so
    /// their gradient is identically absent.
    pub fn param(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar loss with full f64 precision for loss nodes (used by the
    /// finite-difference checker); falls back to the f32 value otherwise.
    pub fn loss_value(&self, id: NodeId) -> f64 {
        match &self.nodes[id.0].op {
            Op::SoftmaxCrossEntropy { loss, .. } | Op::MseLoss { loss, .. } => *loss,
            _ => self.nodes[id.0].value.data()[0] as f64,
        }
    }

    fn shape4(&self, id: NodeId, op: &'static str) -> Result<[usize; 4]> {
        let s = self.nodes[id.0].value.shape();
        if s.len() != 4 {
            return Err(Error::Shape { op, detail: format!("expected 4-D NHWC tensor, got {s:?}") });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let ishape = self.shape4(x, "conv2d")?;
        let kshape = self.shape4(kernel, "conv2d")?;
        let bshape = self.nodes[bias.0].value.shape().to_vec();
        if kshape[2] != ishape[3] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "input has {} channels but kernel expects {} (input {ishape:?}, kernel {kshape:?})",
                    ishape[3], kshape[2]
                ),
            });
        }
        if bshape != [kshape[3]] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias shape {bshape:?} does not match {} filters", kshape[3]),
            });
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::Shape { op: "conv2d", detail: format!("unsupported stride {stride}") });
        }
        if padding == Padding::Valid && (ishape[1] < kshape[0] || ishape[2] < kshape[1]) {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("valid padding needs input >= kernel, got {ishape:?} vs {kshape:?}"),
            });
        }
        let fwd = k::conv2d_forward(
            self.nodes[x.0].value.data(),
            ishape,
            self.nodes[kernel.0].value.data(),
            kshape,
            self.nodes[bias.0].value.data(),
            stride,
            padding,
        );
        check_finite(&fwd.output, "conv2d")?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        let value = Tensor::new(fwd.out_shape.to_vec(), fwd.output)?;
        Ok(self.push(value, needs, Op::Conv2d { x, kernel, bias, stride, padding, cols: fwd.cols }))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let ishape = self.shape4(x, "maxpool2")?;
        if ishape[1] % 2 != 0 || ishape[2] % 2 != 0 {
            return Err(Error::Shape {
                op: "maxpool2",
                detail: format!("spatial dims must be even, got {}x{}", ishape[1], ishape[2]),
            });
        }
        let fwd = k::maxpool2_forward(self.nodes[x.0].value.data(), ishape);
        let needs = self.needs(x);
        let value = Tensor::new(fwd.out_shape.to_vec(), fwd.output)?;
        Ok(self.push(value, needs, Op::MaxPool2 { x, argmax: fwd.argmax }))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let ishape = self.shape4(x, "upsample2")?;
        let (out, oshape) = k::upsample2_forward(self.nodes[x.0].value.data(), ishape);
        let needs = self.needs(x);
        let value = Tensor::new(oshape.to_vec(), out)?;
        Ok(self.push(value, needs, Op::Upsample2 { x }))
    }

    /// [n,h,w,c] -> [n, h*w*c].
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let ishape = self.shape4(x, "flatten")?;
        let value = self.nodes[x.0]
            .value
            .reshaped(vec![ishape[0], ishape[1] * ishape[2] * ishape[3]])?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Flatten { x }))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Shape {
                op: "dense",
                detail: format!("input {xs:?} x weights {ws:?} + bias {bs:?}"),
            });
        }
        let (n, in_dim, units) = (xs[0], xs[1], ws[1]);
        let out = k::dense_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            n,
            in_dim,
            units,
        );
        check_finite(&out, "dense")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![n, units], out)?;
        Ok(self.push(value, needs, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = k::relu_forward(self.nodes[x.0].value.data());
        let shape = self.nodes[x.0].value.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_raw(shape, out), needs, Op::Relu { x })
    }

    /// Train-mode batch norm over [n, features]; returns the node plus the
    /// biased batch statistics so the caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape { op: "batchnorm", detail: format!("expected [n, features], got {xs:?}") });
        }
        let (n, f) = (xs[0], xs[1]);
        if n < 2 {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: "train mode needs batch size >= 2 (variance degenerate)".into(),
            });
        }
        self.check_bn_params(gamma, beta, f)?;
        let fwd = k::batchnorm_train_forward(
            self.nodes[x.0].value.data(),
            n,
            f,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        );
        check_finite(&fwd.output, "batchnorm")?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(vec![n, f], fwd.output)?;
        let id = self.push(
            value,
            needs,
            Op::BatchNormTrain { x, gamma, beta, eps, xhat: fwd.xhat, batch_var: fwd.batch_var.clone() },
        );
        Ok((id, fwd.batch_mean, fwd.batch_var))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape { op: "batchnorm", detail: format!("expected [n, features], got {xs:?}") });
        }
        let f = xs[1];
        self.check_bn_params(gamma, beta, f)?;
        if mean.len() != f || var.len() != f {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: format!("running stats length {} does not match {} features", mean.len(), f),
            });
        }
        let out = k::batchnorm_infer_forward(
            self.nodes[x.0].value.data(),
            f,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            mean,
            var,
            eps,
        );
        check_finite(&out, "batchnorm")?;
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, needs, Op::BatchNormInfer { x, gamma, beta, inv_std, mean: mean.to_vec() }))
    }

    fn check_bn_params(&self, gamma: NodeId, beta: NodeId, f: usize) -> Result<()> {
        let gs = self.nodes[gamma.0].value.shape();
        let bs = self.nodes[beta.0].value.shape();
        if gs != [f] || bs != [f] {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: format!("gamma {gs:?} / beta {bs:?} do not match {f} features"),
            });
        }
        Ok(())
    }

    /// Mean sparse categorical cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.nodes[logits.0].value.shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {ls:?} vs {} labels", labels.len()),
            });
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let fwd = k::softmax_cross_entropy_forward(self.nodes[logits.0].value.data(), labels, c);
        if !fwd.loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let needs = self.needs(logits);
        let value = Tensor::new(vec![1], vec![fwd.loss as f32])?;
        Ok(self.push(
            value,
            needs,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs: fwd.probs, loss: fwd.loss },
        ))
    }

    pub fn mse_loss(&mut self, output: NodeId, target: NodeId) -> Result<NodeId> {
        let os = self.nodes[output.0].value.shape();
        let ts = self.nodes[target.0].value.shape();
        if os != ts {
            return Err(Error::Shape {
                op: "mse_loss",
                detail: format!("output {os:?} vs target {ts:?}"),
            });
        }
        let loss = k::mse_forward(self.nodes[output.0].value.data(), self.nodes[target.0].value.data());
        if !loss.is_finite() {
            return Err(Error::NonFinite("mse_loss".into()));
        }
        let needs = self.needs(output) || self.needs(target);
        let value = Tensor::new(vec![1], vec![loss as f32])?;
        Ok(self.push(value, needs, Op::MseLoss { output, target, loss }))
    }

    /// Symmetric per-channel fake quantization of a weight tensor. Scales are
    /// recomputed from the current values; the backward pass is the clipped
    /// straight-through estimator.
    pub fn fake_quant_weights(&mut self, x: NodeId, bits: u8) -> Result<NodeId> {
        if !matches!(bits, 2 | 4 | 8 | 16) {
            return Err(Error::Config(format!("fake quant bits must be in {{2,4,8,16}}, got {bits}")));
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let channels = *shape.last().unwrap();
        let scales = k::channel_scales_mean_abs(self.nodes[x.0].value.data(), channels);
        let out = k::fake_quant_symmetric(self.nodes[x.0].value.data(), &scales, bits);
        let needs = self.needs(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, needs, Op::FakeQuantWeights { x, scales }))
    }

    /// Unsigned fake quantization of a post-ReLU activation on [0, range].
    pub fn fake_quant_relu(&mut self, x: NodeId, range: f32, bits: u8) -> Result<NodeId> {
        if bits < 2 {
            return Err(Error::Config(format!("activation quant bits must be >= 2, got {bits}")));
        }
        if range <= 0.0 || range.is_nan() {
            return Err(Error::Config(format!("activation range must be positive, got {range}")));
        }
        let out = k::fake_quant_unsigned(self.nodes[x.0].value.data(), range, bits);
        let shape = self.nodes[x.0].value.shape().to_vec();
        let needs = self.needs(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, needs, Op::FakeQuantRelu { x, range }))
    }

    fn accumulate(&mut self, id: NodeId, contribution: &[f32]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse sweep from a scalar loss node. Each node is visited exactly
    /// once; gradients accumulate additively into leaves.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            // Nothing requires a gradient; a no-op backward is still valid.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, kernel, bias, stride, padding, cols } => {
                    let (x, kernel, bias, stride, padding) = (*x, *kernel, *bias, *stride, *padding);
                    let ishape = {
                        let s = self.nodes[x.0].value.shape();
                        [s[0], s[1], s[2], s[3]]
                    };
                    let kshape = {
                        let s = self.nodes[kernel.0].value.shape();
                        [s[0], s[1], s[2], s[3]]
                    };
                    let bwd = k::conv2d_backward(
                        &grad,
                        cols,
                        ishape,
                        self.nodes[kernel.0].value.data(),
                        kshape,
                        stride,
                        padding,
                        self.needs(x),
                    );
                    if let Some(dx) = &bwd.dinput {
                        self.accumulate(x, dx);
                    }
                    self.accumulate(kernel, &bwd.dkernel);
                    self.accumulate(bias, &bwd.dbias);
                }
                Op::MaxPool2 { x, argmax } => {
                    let x = *x;
                    let dx = k::maxpool2_backward(&grad, argmax, self.nodes[x.0].value.numel());
                    self.accumulate(x, &dx);
                }
                Op::Upsample2 { x } => {
                    let x = *x;
                    let ishape = {
                        let s = self.nodes[x.0].value.shape();
                        [s[0], s[1], s[2], s[3]]
                    };
                    let dx = k::upsample2_backward(&grad, ishape);
                    self.accumulate(x, &dx);
                }
                Op::Flatten { x } => {
                    let x = *x;
                    self.accumulate(x, &grad);
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let bwd = k::dense_backward(
                        &grad,
                        self.nodes[x.0].value.data(),
                        self.nodes[w.0].value.data(),
                        xs[0],
                        xs[1],
                        ws[1],
                        self.needs(x),
                    );
                    if let Some(dx) = &bwd.dx {
                        self.accumulate(x, dx);
                    }
                    self.accumulate(w, &bwd.dw);
                    self.accumulate(b, &bwd.db);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx = k::relu_backward(&grad, self.nodes[x.0].value.data());
                    self.accumulate(x, &dx);
                }
                Op::BatchNormTrain { x, gamma, beta, eps, xhat, batch_var } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let bwd = k::batchnorm_train_backward(
                        &grad,
                        xhat,
                        batch_var,
                        self.nodes[gamma.0].value.data(),
                        xs[0],
                        xs[1],
                        eps,
                    );
                    self.accumulate(x, &bwd.dx);
                    self.accumulate(gamma, &bwd.dgamma);
                    self.accumulate(beta, &bwd.dbeta);
                }
                Op::BatchNormInfer { x, gamma, beta, inv_std, mean } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let f = inv_std.len();
                    let gdata = self.nodes[gamma.0].value.data().to_vec();
                    let xdata = self.nodes[x.0].value.data();
                    let mut dx = vec![0.0f32; xdata.len()];
                    let mut dgamma = vec![0.0f32; f];
                    let mut dbeta = vec![0.0f32; f];
                    for (gr, xr) in grad.chunks(f).zip(xdata.chunks(f)) {
                        for j in 0..f {
                            dgamma[j] += gr[j] * (xr[j] - mean[j]) * inv_std[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    for (dxr, gr) in dx.chunks_mut(f).zip(grad.chunks(f)) {
                        for j in 0..f {
                            dxr[j] = gr[j] * gdata[j] * inv_std[j];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs, .. } => {
                    let logits = *logits;
                    let c = self.nodes[logits.0].value.shape()[1];
                    let dl = k::softmax_cross_entropy_backward(probs, labels, c, grad[0]);
                    self.accumulate(logits, &dl);
                }
                Op::MseLoss { output, target, .. } => {
                    let (output, target) = (*output, *target);
                    let o = self.nodes[output.0].value.data();
                    let t = self.nodes[target.0].value.data();
                    let dout = k::mse_backward(o, t, grad[0]);
                    if self.needs(output) {
                        self.accumulate(output, &dout);
                    }
                    if self.needs(target) {
                        let dt: Vec<f32> = dout.iter().map(|&v| -v).collect();
                        self.accumulate(target, &dt);
                    }
                }
                Op::FakeQuantWeights { x, scales } => {
                    let x = *x;
                    let channels = scales.len();
                    let scales = scales.clone();
                    let xdata = self.nodes[x.0].value.data();
                    // Clipped straight-through estimator: pass the gradient
                    // where |w/scale| <= 1, zero outside.
                    let dx: Vec<f32> = grad
                        .iter()
                        .enumerate()
                        .map(|(idx, &g)| {
                            let s = scales[idx % channels];
                            if (xdata[idx] / s).abs() <= 1.0 {
                                g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::FakeQuantRelu { x, range } => {
                    let (x, range) = (*x, *range);
                    let xdata = self.nodes[x.0].value.data();
                    let dx: Vec<f32> = grad
                        .iter()
                        .zip(xdata)
                        .map(|(&g, &v)| if (0.0..=range).contains(&v) { g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }
}

