use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients held in `store`.
    ///
    /// Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Usage("optimizer was built for a different parameter set".into()));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / corr1;
                let vh = v[i] / corr2;
                value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec([values.len(), 1, 1, 1], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0, 1.0]);
        s.get_mut(crate::nn::ParamId(0)).grad.data_mut().copy_from_slice(&[3.0, -0.01]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s).unwrap();
        let v = s.get(crate::nn::ParamId(0)).value.data();
        assert!((v[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((v[1] - (1.0 + 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.3, -1.2, 2.0];
        let mut s = store(&[0.0, 0.0, 0.0]);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &s);
        let id = crate::nn::ParamId(0);
        let mut done = None;
        for it in 0..5000 {
            let p = s.get_mut(id);
            let vals = p.value.data().to_vec();
            for (g, (x, t)) in p.grad.data_mut().iter_mut().zip(vals.iter().zip(&target)) {
                *g = 2.0 * (x - t);
            }
            if vals.iter().zip(&target).all(|(x, t)| (x - t).abs() < 1e-6) {
                done = Some(it);
                break;
            }
            opt.step(&mut s).unwrap();
        }
        assert!(done.is_some(), "did not converge: {:?}", s.get(id).value.data());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(&[1.0]);
        s.get_mut(crate::nn::ParamId(0)).grad.data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::default(), &s);
        assert!(matches!(opt.step(&mut s), Err(Error::NonFinite(_))));
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
