use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..10 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![Tensor::vector(vec![0.5])];
        let g = vec![Tensor::vector(vec![3.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &p);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.5]);
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        // With a constant gradient m_hat = g and v_hat = g^2 exactly, so each
        // step is lr * g / (|g| + eps).
        let lr = 0.01;
        let g = 0.37;
        let mut p = vec![Tensor::vector(vec![0.0])];
        let grads = vec![Tensor::vector(vec![g])];
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &p);
        let mut prev = 0.0;
        for step in 0..200 {
            adam.step(&mut p, &grads).unwrap();
            let now = p[0].data()[0];
            let delta = prev - now;
            let expected = lr * g / (g + 1e-8);
            assert!(
                (delta - expected).abs() < 1e-12,
                "step {step}: {delta} vs {expected}"
            );
            prev = now;
        }
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = vec![Tensor::vector(vec![0.0, 1.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let bad = vec![Tensor::vector(vec![1.0])];
        assert!(adam.step(&mut p, &bad).is_err());
    }
}
