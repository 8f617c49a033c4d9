use serde::{Deserialize, Serialize};

use super::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction; optional decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Params>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
    }
}

/// Linear warm-up from 0 to `peak`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as u64,
            total_steps,
        }
    }

    /// Learning rate for the update with zero-based index `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps.max(1) as f64
        } else {
            let remaining = self.total_steps.saturating_sub(step) as f64;
            let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
            self.peak * remaining / span
        }
    }
}

/// Scale factor that brings a gradient of squared norm `sq_norm` down to
/// `max_norm`; 1 when no clipping is needed or `max_norm <= 0`.
pub fn clip_global_norm(sq_norm: f64, max_norm: f64) -> f64 {
    let norm = sq_norm.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 0.5).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
        let flat = LrSchedule::new(2.0, 0.0, 10);
        assert_eq!(flat.lr(0), 2.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Linear::zeros(1, 1);
        p.weight[[0, 0]] = 3.0;
        p.bias[0] = -2.0;
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let mut g = Linear::zeros(1, 1);
            g.weight[[0, 0]] = 2.0 * p.weight[[0, 0]];
            g.bias[0] = 2.0 * p.bias[0];
            opt.update(&mut p, &g, 0.01);
        }
        assert!(p.weight[[0, 0]].abs() < 1e-2);
        assert!(p.bias[0].abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_global_norm(4.0, 1.0), 0.5);
        assert_eq!(clip_global_norm(0.25, 1.0), 1.0);
        assert_eq!(clip_global_norm(100.0, 0.0), 1.0);
    }
}
