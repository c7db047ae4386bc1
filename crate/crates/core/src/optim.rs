//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update from the gradients currently held by `store`. Decay applies
    /// to `Weight` parameters only; buffers are never touched; clamped
    /// parameters are projected back afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable() {
                continue;
            }
            let decay = if e.kind == ParamKind::Weight {
                lr * c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = e.grad.data();
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *p -= decay * *p + lr * upd;
                if let Some((lo, hi)) = e.clamp {
                    *p = p.clamp(lo, hi);
                }
            }
        }
    }
}

/// `min + ½(base − min)(1 + cos(π·step/total))`, held at `min` past `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, min: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}
