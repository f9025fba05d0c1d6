use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};
use crate::math;
use crate::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0004,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config }
    }

    /// Applies one update to every trainable parameter and clears the gradients.
    pub fn step(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        let c = self.config;
        for (_, p) in store.iter() {
            if p.trainable && p.grad.is_none() {
                return Err(TensorError::MissingGradient(p.name.clone()));
            }
        }
        store.step += 1;
        let t = store.step as f64;
        let bc1 = 1.0 - math::powf(c.beta1, t);
        let bc2 = 1.0 - math::powf(c.beta2, t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let decay = 1.0 - c.lr * c.weight_decay;
            let w = p.value.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] * decay - c.lr * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let (mut s, id) = single(0.0);
        s.accumulate_grad(id, &Tensor::scalar(1.0));
        let adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        adam.step(&mut s).unwrap();
        // lr * g / (|g| + eps)
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert!(s.get(id).grad.is_none(), "gradient cleared");
    }

    #[test]
    fn zero_gradient_leaves_weight() {
        let (mut s, id) = single(0.75);
        let adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..50 {
            s.accumulate_grad(id, &Tensor::scalar(0.0));
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value(id).item(), 0.75);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let (mut s, id) = single(2.0);
        let adam = Adam::new(AdamConfig {
            weight_decay: 0.0004,
            ..Default::default()
        });
        for _ in 0..10 {
            s.accumulate_grad(id, &Tensor::scalar(0.0));
            adam.step(&mut s).unwrap();
        }
        let expected = 2.0 * (1.0f64 - 0.001 * 0.0004).powi(10);
        assert!((s.value(id).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn missing_gradient_is_error() {
        let (mut s, _) = single(1.0);
        let adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut s),
            Err(TensorError::MissingGradient(_))
        ));
    }
}
