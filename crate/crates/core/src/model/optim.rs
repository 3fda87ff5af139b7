use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{invalid, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            weight_decay: 1e-3,
        }
    }
}

/// Adam with decoupled weight decay; the decay term is scaled by the
/// learning rate, so a zero rate leaves parameters untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update, then round parameters to single precision.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid("AdamW::step", "one gradient per parameter tensor"));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - math::powf(c.beta1, self.t as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.t as f64);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != t.len() {
                return Err(invalid("AdamW::step", "gradient length mismatch"));
            }
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let upd = (m[j] / bc1) / (math::sqrt(v[j] / bc2) + c.eps) + c.weight_decay * *p;
                *p -= lr * upd;
            }
        }
        params.round_to_f32();
        Ok(())
    }
}

/// Cosine annealing from `lr_max` to `lr_min`, restarting every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: f64,
}

impl CosineSchedule {
    /// Rate at fractional epoch `epoch`.
    pub fn lr(&self, epoch: f64) -> f64 {
        let phase = if self.period > 0.0 {
            let r = epoch % self.period;
            r / self.period
        } else {
            0.0
        };
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math::cos(math::PI * phase))
    }
}
