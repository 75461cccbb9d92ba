//! Adaptive-moment optimizer over a flat parameter vector, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            weight_decay: 0.0,
        }
    }
}

/// Adam with sparse semantics: entries whose gradient is exactly zero keep their moments and
/// values, so untouched hash-table rows are not dragged by stale momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len().to_string(),
                actual: format!("{} params / {} grads", params.len(), grad.len()),
            });
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let step_size = T::lit(lr * bc2.sqrt() / bc1);
        let eps = T::lit(c.eps * bc2.sqrt());
        let wd = T::lit(c.weight_decay);
        for i in 0..params.len() {
            let mut g = grad[i];
            if g == T::zero() {
                continue;
            }
            if c.weight_decay != 0.0 {
                g += wd * params[i];
            }
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] -= step_size * self.m[i] / (self.v[i].sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp over `warmup` iterations, then multiplied by `(1 - decay)` each iteration.
    WarmupDecay { warmup: usize, decay: f64 },
}

impl LrSchedule {
    pub fn factor(&self, iteration: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupDecay { warmup, decay } => {
                if iteration < warmup {
                    (iteration + 1) as f64 / warmup as f64
                } else {
                    (1.0 - decay).powi((iteration - warmup) as i32)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::WarmupDecay { decay, .. } = self {
            if !(0.0..1.0).contains(decay) {
                return Err(Error::Config(format!("lr decay must be in [0, 1), got {decay}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::<f64>::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, 2.0, 3.0];
        opt.update(&mut p, &[0.5, -2.0, 0.0], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] - 2.1).abs() < 1e-12);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = Adam::<f64>::new(AdamConfig::default(), 2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * (p[1] + 1.0)];
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!(p[0].abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn zero_gradient_leaves_parameters_unchanged(p in prop::collection::vec(-10.0f32..10.0, 1..20), warm in prop::collection::vec(-1.0f32..1.0, 20)) {
            let mut opt = Adam::<f32>::new(AdamConfig::default(), p.len());
            let mut params = p.clone();
            opt.update(&mut params, &warm[..p.len()], 0.01).unwrap();
            let before = params.clone();
            opt.update(&mut params, &vec![0.0; p.len()], 0.01).unwrap();
            prop_assert_eq!(params, before);
        }
    }

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule::WarmupDecay { warmup: 20, decay: 0.005 };
        assert!((s.factor(0) - 0.05).abs() < 1e-12);
        assert!((s.factor(19) - 1.0).abs() < 1e-12);
        assert!((s.factor(20) - 1.0).abs() < 1e-12);
        assert!((s.factor(120) - 0.995f64.powi(100)).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.factor(500), 1.0);
    }
}
