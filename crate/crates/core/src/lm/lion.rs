//! Lion: sign-of-interpolated-momentum updates with decoupled weight decay.
//!
//! ```text
//! u = sign(beta1 * m + (1 - beta1) * g)
//! p = p - lr * (u + weight_decay * p)
//! m = beta2 * m + (1 - beta2) * g
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LionConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-2,
        }
    }
}

impl LionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.beta1) || !(0.0..=1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter array, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct LionState {
    pub config: LionConfig,
    pub momentum: Vec<Tensor>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl LionState {
    pub fn new<'a>(config: LionConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            config,
            momentum: params.into_iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite or a
    /// shape disagrees.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>) -> Result<()> {
        if params.len() != self.momentum.len() || grads.len() != self.momentum.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.momentum.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(&grads).zip(&self.momentum).enumerate() {
            if p.shape != g.shape || p.shape != m.shape {
                return Err(Error::ShapeMismatch {
                    name: format!("parameter #{i}"),
                    expected: m.shape.clone(),
                    found: g.shape.clone(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
            }
        }
        let LionConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
        } = self.config;
        for ((p, g), m) in params.into_iter().zip(grads).zip(&mut self.momentum) {
            for ((pv, &gv), mv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                let u = sign(beta1 * *mv + (1.0 - beta1) * gv);
                *pv -= lr * (u + weight_decay * *pv);
                *mv = beta2 * *mv + (1.0 - beta2) * gv;
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: Vec<&mut Tensor>, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.scale(s);
        }
    }
    norm
}
