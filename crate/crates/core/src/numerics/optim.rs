use serde::{Deserialize, Serialize};

use super::{Matrix, ParamBlock};
use crate::error::{Error, Result};

/// Adam hyperparameters. `weight_decay = 0` gives plain Adam; otherwise the
/// decay is decoupled (AdamW) and applied only to blocks flagged `decay`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// First and second moments for an ordered set of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new<'a>(hyper: AdamHyper, blocks: impl IntoIterator<Item = &'a ParamBlock>) -> Self {
        let (m, v) = blocks
            .into_iter()
            .map(|b| {
                let (r, c) = b.value.shape();
                (Matrix::zeros(r, c), Matrix::zeros(r, c))
            })
            .unzip();
        Self { hyper, t: 0, m, v }
    }

    /// One bias-corrected AdamW step over `blocks`, which must be passed in
    /// the same order as at construction.
    pub fn step(&mut self, blocks: &mut [&mut ParamBlock]) -> Result<()> {
        if blocks.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} blocks but {} were passed",
                self.m.len(),
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.grad.shape() != b.value.shape() || b.value.shape() != self.m[i].shape() {
                return Err(Error::contract(format!(
                    "block '{}' shape {:?} (grad {:?}) does not match optimizer state {:?}",
                    b.name,
                    b.value.shape(),
                    b.grad.shape(),
                    self.m[i].shape()
                )));
            }
        }

        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for (i, b) in blocks.iter_mut().enumerate() {
            let decay = if b.decay { h.lr * h.weight_decay } else { 0.0 };
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let g = b.grad.as_slice();
            let w = b.value.as_mut_slice();
            for k in 0..w.len() {
                m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
                v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= decay * w[k];
                w[k] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }

    /// Resets moments and the step counter, keeping hyperparameters.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.iter_mut().for_each(|m| m.fill(0.0));
        self.v.iter_mut().for_each(|v| v.fill(0.0));
    }
}
