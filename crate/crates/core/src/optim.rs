//! SGD with momentum, weight decay and a poly learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }
}

impl SgdConfig {
    /// `lr0 · (1 − iter/iters)^power`, clamped at zero past the end.
    pub fn lr_at(&self, iter: usize, iters: usize) -> f64 {
        if iters == 0 {
            return self.lr0;
        }
        let frac = (1.0 - iter as f64 / iters as f64).max(0.0);
        self.lr0 * frac.powf(self.poly_power)
    }
}

/// Momentum buffer for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    iters: usize,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, num_params: usize, iters: usize) -> Self {
        Self {
            cfg,
            iters,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// `v ← μ·v + g + λ·θ;  θ ← θ − lr(iter)·v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], iter: usize) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        let lr = self.cfg.lr_at(iter, self.iters);
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.cfg.momentum * *v + g + self.cfg.weight_decay * *p;
            if lr != 0.0 {
                *p -= lr * *v;
            }
        }
    }
}
