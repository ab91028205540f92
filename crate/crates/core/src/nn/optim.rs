use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. Every coordinate is updated independently, so the result
    /// does not depend on how the flat arrays are ordered.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("optimizer parameters", self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::shape("optimizer gradients", params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut opt = AdamW::new(AdamWConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected m_hat = g, v_hat = g^2,
        // so the step is -lr * g / (|g| + eps).
        let cfg = AdamWConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 3);
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        opt.step(&mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn pure_weight_decay() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![2.0, -4.0];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 2.0 * 0.999).abs() < 1e-15);
        assert!((p[1] + 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![0.0; 2];
        assert!(matches!(
            opt.step(&mut p, &[0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn storage_order_invariant() {
        let g = [0.3, -0.1, 2.0, 0.0];
        let p0 = [1.0, 2.0, 3.0, 4.0];
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut a = AdamW::new(cfg, 4);
        let mut pa = p0.to_vec();
        let mut b = AdamW::new(cfg, 4);
        let perm = [2, 0, 3, 1];
        let mut pb: Vec<f64> = perm.iter().map(|&i| p0[i]).collect();
        for _ in 0..3 {
            a.step(&mut pa, &g).unwrap();
            let gb: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
            b.step(&mut pb, &gb).unwrap();
        }
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pb[k], pa[i]);
        }
    }
}
