use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment buffers, indexed like the parameters of the store they step.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// First and second moments of parameter `index`, once it has been
    /// updated at least once.
    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(index)
            .and_then(|m| m.as_ref())
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected Adam update of every unfrozen parameter. A
    /// non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.frozen && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let g = p.grad[j] + c.weight_decay * w[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value));
        s.get_mut(id).grad[0] = grad;
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut s = store(1.5, 0.0);
        let mut a = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        a.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item(), 1.5);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(1.0, 0.5);
        let mut a = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        a.step(&mut s).unwrap();
        let expected = 1.0 - 1e-4 * (0.5 / (0.5 + 1e-8));
        assert!((s.iter().next().unwrap().1.value.item() - expected).abs() < 1e-15);
        assert_eq!(a.step_count, 1);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut s = store(2.0, 3.0);
        s.set_frozen("p", true);
        let mut a = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            a.step(&mut s).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.item().to_bits(), 2f64.to_bits());
        assert_eq!(a.step_count, 5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(1.0, f64::NAN);
        let mut a = AdamState::new(AdamConfig::default());
        let err = a.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
        assert_eq!(a.step_count, 0);
    }
}
