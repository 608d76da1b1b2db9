//! Adaptive-moment gradient descent with bias correction.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Per-parameter first/second moment accumulators keyed by parameter name.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// updating parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to a single parameter tensor. Rejects non-finite
    /// gradients, naming the parameter.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("{name}: gradient length {} vs parameter {}", grad.len(), param.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
        if self.step == 0 {
            return Err(Error::Numeric("adam update before begin_step".into()));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, &g), (mi, vi)) in param.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Drops accumulated moments (used when a new training stage starts).
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }
}
