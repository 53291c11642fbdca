//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tcrnet::TcrNetParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` using `grads` (same structure).
    pub fn step(&mut self, params: &mut TcrNetParams, grads: &TcrNetParams) {
        let mut g = Vec::new();
        grads.for_each_tensor(|_, t| g.push(t.to_vec()));
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.for_each_tensor_mut(|_, p| {
            let (m, v, g) = (&mut ms[idx], &mut vs[idx], &g[idx]);
            assert_eq!(p.len(), g.len(), "gradient structure mismatch");
            for i in 0..p.len() {
                if weight_decay != 0.0 {
                    p[i] -= lr * weight_decay * p[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcrnet::{init_params, ModelConfig, Task};

    fn tiny() -> TcrNetParams {
        init_params(
            &ModelConfig {
                dim: 4,
                heads: 2,
                tasks: vec![Task::DarkHumor],
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = tiny();
        let before = p.clone();
        let zeros = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &zeros);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.classifiers[0].bias[0] = 3.0;
        g.classifiers[0].bias[1] = -0.001;
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..AdamWConfig::default() });
        opt.step(&mut p, &g);
        // bias-corrected first step is lr * g / (|g| + eps)
        let d0 = p.classifiers[0].bias[0] - before.classifiers[0].bias[0];
        let d1 = p.classifiers[0].bias[1] - before.classifiers[0].bias[1];
        assert!((d0 + 0.1).abs() < 1e-6);
        assert!((d1 - 0.1).abs() < 1e-4);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let mut p = tiny();
        let w0 = p.flows[0].attn.w_q[[0, 0]];
        let zeros = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() });
        opt.step(&mut p, &zeros);
        assert!((p.flows[0].attn.w_q[[0, 0]] - w0 * 0.95).abs() < 1e-15);
    }
}
