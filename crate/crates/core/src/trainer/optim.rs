//! Learning-rate schedules, Adam with inspectable state, and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Exponential decay: `lr0 * base^(step / every)`.
pub fn node_lr(step: u64, lr0: f64, base: f64, every: u64) -> f64 {
    lr0 * base.powf(step as f64 / every as f64)
}

/// Cosine annealing from `lr0` down to `lr_min` over `t_max` steps.
pub fn interval_lr(step: u64, t_max: u64, lr0: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * step as f64 / t_max as f64).cos())
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub t: u64,
    params: Vec<(String, Var)>,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            params,
            moments: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// One update with gradients multiplied by `grad_scale` (for clipping).
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * grad_scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(grads: &GradStore, params: &[(String, Var)]) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in params {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Scale that brings a gradient of norm `norm` within `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn schedules_closed_form() {
        assert_eq!(node_lr(0, 1e-3, 0.99, 126), 1e-3);
        assert!((node_lr(126, 1e-3, 0.99, 126) - 9.9e-4).abs() < 1e-12);
        assert!((node_lr(252, 1e-3, 0.99, 126) - 9.801e-4).abs() < 1e-12);
        assert!((interval_lr(0, 1000, 1e-3, 2e-4) - 1e-3).abs() < 1e-12);
        assert!((interval_lr(500, 1000, 1e-3, 2e-4) - 6e-4).abs() < 1e-12);
        assert!((interval_lr(1000, 1000, 1e-3, 2e-4) - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let w = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(vec![("w".into(), w.clone())]);
        opt.step(&grads, 0.1, 1.0).unwrap();
        let v: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 2.1).abs() < 1e-6);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn clipping_scale() {
        assert_eq!(clip_scale(3.0, 5.0), 1.0);
        assert!((clip_scale(10.0, 5.0) * 10.0 - 5.0).abs() < 1e-6);
    }
}
