use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to `sqrt(v_hat)` in the denominator.
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `1e-4 * batch / 64`: keeps the learning-rate to batch-size ratio fixed.
pub fn default_lr(batch_size: usize) -> f64 {
    1e-4 * batch_size as f64 / 64.0
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Result<Self, NnError> {
        let c = config;
        if !(c.lr > 0.0 && (0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps > 0.0) {
            return Err(NnError::Optimizer(format!("{c:?}")));
        }
        Ok(Self {
            config,
            step_count: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = Adam::new(AdamConfig::default(), 3).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g and v_hat = g^2 after one step, so the update is
        // -lr * g / (|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, 3).unwrap();
        let g = [0.3, -4.0, 1e-9];
        let mut p = vec![0.0; 3];
        opt.step(&mut p, &g);
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn rejects_bad_config_and_defaults_scale() {
        assert!(Adam::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }, 1).is_err());
        assert_eq!(default_lr(64), 1e-4);
        assert_eq!(default_lr(256), 4e-4);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let run = || {
            let mut opt = Adam::new(AdamConfig::default(), 2).unwrap();
            let mut p = vec![1.0, 1.0];
            for k in 0..50 {
                let g = [p[0] * 2.0 + k as f64 * 1e-3, (p[1] - 0.3).sin()];
                opt.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
