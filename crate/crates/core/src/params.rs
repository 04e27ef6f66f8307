//! Parameter traversal, gradient containers and the Adam optimizer.
//!
//! Gradients are stored in a value of the same type as the model they belong to, so
//! a model and its gradient always agree on tensor order and shape.

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub trait Parameterized {
    /// Trainable tensors in a fixed order.
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Non-trainable state that still belongs in a checkpoint (normalization statistics).
    fn buffers(&self) -> Vec<&Tensor> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    /// Re-establish structural constraints after an update (kernel masks).
    fn constrain(&mut self) {}

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Clone `model` with every trainable tensor zeroed; used as a gradient accumulator.
pub fn zeros_like<M: Parameterized + Clone>(model: &M) -> M {
    let mut g = model.clone();
    for t in g.params_mut() {
        t.data.fill(0.0);
    }
    g
}

pub fn accumulate<M: Parameterized>(dst: &mut M, src: &M) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        for (a, b) in d.data.iter_mut().zip(&s.data) {
            *a += b;
        }
    }
}

pub fn scale<M: Parameterized>(model: &mut M, factor: f64) {
    for t in model.params_mut() {
        for v in t.data.iter_mut() {
            *v *= factor;
        }
    }
}

pub fn flatten<M: Parameterized>(model: &M) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|t| t.data.iter().copied())
        .collect()
}

pub fn unflatten<M: Parameterized>(model: &mut M, values: &[f64]) {
    let mut off = 0;
    for t in model.params_mut() {
        let n = t.len();
        t.data.copy_from_slice(&values[off..off + n]);
        off += n;
    }
    assert_eq!(off, values.len(), "flat parameter vector length mismatch");
}

/// Names of every trainable scalar, `tensor[index]`, in flatten order.
pub fn flat_owners<M: Parameterized>(model: &M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for t in model.params() {
        for i in 0..t.len() {
            out.push((t.name.clone(), i));
        }
    }
    out
}

pub fn grad_norm<M: Parameterized>(grads: &M) -> f64 {
    grads
        .params()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// SHA-256 over tensor names, shapes and little-endian values (params then buffers).
pub fn checksum<M: Parameterized>(model: &M) -> String {
    let mut h = Sha256::new();
    for t in model.params().into_iter().chain(model.buffers()) {
        h.update(t.name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &M) {
        let gs = grads.params();
        if self.m.is_empty() {
            self.m = gs.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = gs.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        model.constrain();
    }
}
