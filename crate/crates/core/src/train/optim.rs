//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub min_lr_frac: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            min_lr_frac: 0.1,
            warmup: 100,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / decay as f64).min(1.0);
        let min = self.lr * self.min_lr_frac;
        min + 0.5 * (self.lr - min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Moments and per-tensor update counts.
///
/// A tensor whose gradient is absent for a step keeps its value, its moments
/// and its count; weight decay applies to matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub counts: Vec<u64>,
}

impl<T: Float> AdamW<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            counts: vec![0; shapes.len()],
        }
    }

    /// Clips, updates and returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        cfg: &AdamWConfig,
        lr: f64,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<Vec<T>>],
    ) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|&x| x.as_f64() * x.as_f64()).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, eps, scale_t) = (T::one(), T::lit(cfg.eps), T::lit(scale));
        let lr_t = T::lit(lr);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
            let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
            let decay = if p.shape().len() >= 2 { T::lit(1.0 - lr * cfg.weight_decay) } else { one };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale_t;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
