//! Adam with bias correction, and the MSE loss.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Parameter, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every non-frozen parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in params.iter().filter(|p| !p.is_frozen()) {
            let n = p.numel();
            let grad = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let state = self.moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if state.m.len() != n || grad.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: vec![state.m.len()],
                    rhs: vec![grad.len()],
                });
            }
            for ((m, v), g) in state.m.iter_mut().zip(&mut state.v).zip(&grad) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            }
            let (m, v) = (&state.m, &state.v);
            p.tensor().update_leaf(|data| {
                for i in 0..n {
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }
}

/// Mean of squared differences over all entries.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    pred.sub(target)?.square()?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let t = |v: &[f64]| Tensor::new(&[1, v.len()], v.to_vec()).unwrap();
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap().item().unwrap(), 0.0);
        assert_eq!(mse_loss(&t(&[2.0, 3.0]), &t(&[1.0, 2.0])).unwrap().item().unwrap(), 1.0);
        assert_eq!(mse_loss(&t(&[0.0, 2.0]), &t(&[1.0, 1.0])).unwrap().item().unwrap(), 1.0);
        assert!(mse_loss(&t(&[0.0]), &t(&[1.0, 1.0])).is_err());
    }

    fn loss_for(p: &Parameter, coeffs: &[f64]) -> Tensor {
        p.tensor().mul(&Tensor::vector(coeffs).unwrap()).unwrap().sum().unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = Parameter::new("w", &[3], vec![1.0, 1.0, 1.0]).unwrap();
        loss_for(&p, &[2.5, -0.3, 1e3]).backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(std::slice::from_ref(&p)).unwrap();
        let lr = adam.config.lr;
        let v = p.values();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        for (x, g) in v.iter().zip([2.5f64, -0.3, 1e3]) {
            let want = 1.0 - lr * g / (g.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
            assert!(((1.0 - x).abs() - lr).abs() < lr * 1e-6);
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_and_frozen_untouched() {
        let p = Parameter::new("w", &[2], vec![0.5, -0.5]).unwrap();
        let q = Parameter::new("q", &[2], vec![0.5, -0.5]).unwrap();
        q.set_frozen(true);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            p.zero_grad();
            q.zero_grad();
            loss_for(&p, &[0.0, 0.0]).add(&loss_for(&q, &[1.0, 1.0])).unwrap().backward().unwrap();
            adam.step(&[p.clone(), q.clone()]).unwrap();
        }
        assert_eq!(p.values(), vec![0.5, -0.5]);
        assert_eq!(q.values(), vec![0.5, -0.5]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let p = Parameter::new("w", &[2], vec![3.0, -2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..2000 {
            p.zero_grad();
            p.tensor().square().unwrap().sum().unwrap().backward().unwrap();
            adam.step(std::slice::from_ref(&p)).unwrap();
        }
        assert!(p.values().iter().all(|v| v.abs() < 1e-2));
    }
}
