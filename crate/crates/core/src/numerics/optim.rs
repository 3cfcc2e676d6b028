use std::collections::BTreeMap;

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters. The paper names the optimizer without
/// hyperparameters; these are the standard defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam step over every non-frozen group that
    /// has a gradient. Frozen groups are untouched, moments included.
    pub fn step<F: Scalar>(
        &self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, Tensor<F>>,
        lr: f64,
    ) -> Result<()> {
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let (bc1, bc2) = (F::from_f64(bc1), F::from_f64(bc2));
        let eps = F::from_f64(self.eps);
        let lr_f = F::from_f64(lr);
        let wd = F::from_f64(self.weight_decay);

        for (name, grad) in grads {
            let group = store
                .group_mut(name)
                .ok_or_else(|| Error::contract("adamw_step", format!("gradient for unknown parameter `{name}`")))?;
            if group.frozen {
                // backward never emits gradients for frozen leaves; a hit here
                // means the caller mixed stores between stages
                return Err(Error::contract(
                    "adamw_step",
                    format!("gradient supplied for frozen parameter `{name}`"),
                ));
            }
            if grad.shape() != group.tensor.shape() {
                return Err(Error::contract(
                    "adamw_step",
                    format!(
                        "gradient shape {:?} vs parameter shape {:?} for `{name}`",
                        grad.shape(),
                        group.tensor.shape()
                    ),
                ));
            }
            let g = grad.data();
            let m = group.m.data_mut();
            let v = group.v.data_mut();
            let p = group.tensor.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `peak` down to `floor` over `total_steps`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { peak: 1e-4, floor: 1e-6, total_steps: 1000 }
    }
}

impl LrSchedule {
    pub fn new(peak: f64, floor: f64, total_steps: u64) -> Self {
        LrSchedule { peak, floor, total_steps }
    }

    /// lr(step) = floor + 0.5 (peak - floor) (1 + cos(pi step / total)).
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(
                "cosine_lr",
                format!("step {step} out of range 0..={}", self.total_steps),
            ));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0).unwrap(), 1e-4);
        assert!((s.lr(s.total_steps).unwrap() - 1e-6).abs() < 1e-18);
        assert!((s.lr(s.total_steps / 2).unwrap() - 5.05e-5).abs() < 1e-12);
    }

    #[test]
    fn cosine_monotone_non_increasing() {
        let s = LrSchedule::new(3e-3, 1e-5, 777);
        let mut prev = f64::INFINITY;
        for step in 0..=s.total_steps {
            let lr = s.lr(step).unwrap();
            assert!(lr <= prev + 1e-18, "lr increased at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn cosine_rejects_out_of_range() {
        let s = LrSchedule::default();
        assert!(s.lr(s.total_steps + 1).is_err());
    }
}
