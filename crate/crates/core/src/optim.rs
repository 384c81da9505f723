//! Adam with bias correction, and the warmup / linear-decay learning rate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment of a parameter, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|m| (m.first.as_slice(), m.second.as_slice()))
    }

    /// One update of every trainable parameter in `params`. A trainable
    /// parameter without an entry in `grads` is treated as having zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if !p.same_shape(g) {
                return Err(Error::dim(
                    "adam_step",
                    format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let g = grads.get(name).map(Tensor::data);
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m.first[i] = b1 * m.first[i] + (1.0 - b1) * gi;
                m.second[i] = b2 * m.second[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.first[i] / bc1;
                let v_hat = m.second[i] / bc2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup` steps, then linear decay
/// to 0 at `total`; 0 afterwards.
pub fn lr_at_step(step: u64, warmup: u64, total: u64, peak_lr: f64) -> Result<f64> {
    if warmup == 0 || total <= warmup {
        return Err(Error::Config(format!(
            "schedule needs 0 < warmup < total, got warmup={warmup} total={total}"
        )));
    }
    let lr = if step <= warmup {
        peak_lr * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        peak_lr * (total - step) as f64 / (total - warmup) as f64
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value).with_requires_grad(true));
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single(1.5);
        let mut adam = Adam::new();
        adam.step(&mut params, &grad(3.0), 0.1).unwrap();
        let after_first = params.get("w").unwrap().item();
        let m1 = adam.moments("w").unwrap().0[0];
        for _ in 0..5 {
            adam.step(&mut params, &grad(0.0), 0.1).unwrap();
        }
        let m6 = adam.moments("w").unwrap().0[0];
        assert!(m6.abs() < m1.abs());
        // moments decay but the bias-corrected first moment still moves w
        assert_ne!(params.get("w").unwrap().item(), after_first);

        let mut fresh = single(1.5);
        let mut adam = Adam::new();
        adam.step(&mut fresh, &grad(0.0), 0.1).unwrap();
        assert_eq!(fresh.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn constant_gradient_moves_by_lr_against_its_sign() {
        // With constant g the bias-corrected moments are exactly g and g^2, so
        // every update is -lr * g / (|g| + eps).
        let lr = 0.01;
        let g = 0.37;
        let mut params = single(0.0);
        let mut adam = Adam::new();
        let mut prev = 0.0;
        for k in 1..=200u64 {
            adam.step(&mut params, &grad(g), lr).unwrap();
            let w = params.get("w").unwrap().item();
            let expected = -lr * g / (g + 1e-8);
            assert!((w - prev - expected).abs() < 1e-12, "step {k}");
            prev = w;
        }
        assert_eq!(adam.step_count(), 200);
    }

    #[test]
    fn frozen_parameters_are_not_touched() {
        let mut params = single(1.0);
        params.insert("frozen", Tensor::scalar(2.0));
        let mut adam = Adam::new();
        let mut grads = grad(1.0);
        grads.insert("frozen".into(), Tensor::scalar(1.0));
        adam.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.get("frozen").unwrap().item(), 2.0);
    }

    #[test]
    fn shape_mismatch_and_bad_lr_fail() {
        let mut params = single(1.0);
        let mut adam = Adam::new();
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(1, 2))]);
        assert!(matches!(adam.step(&mut params, &bad, 0.1), Err(Error::Dimension { .. })));
        assert!(adam.step(&mut params, &grad(1.0), 0.0).is_err());
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at_step(0, 100, 200, 1e-5).unwrap(), 0.0);
        assert_eq!(lr_at_step(100, 100, 200, 1e-5).unwrap(), 1e-5);
        assert!((lr_at_step(150, 100, 200, 1e-5).unwrap() - 5e-6).abs() < 1e-18);
        assert!((lr_at_step(50, 100, 200, 1e-5).unwrap() - 5e-6).abs() < 1e-18);
        assert_eq!(lr_at_step(200, 100, 200, 1e-5).unwrap(), 0.0);
        assert_eq!(lr_at_step(500, 100, 200, 1e-5).unwrap(), 0.0);
        assert!(lr_at_step(1, 100, 100, 1e-5).is_err());
    }

    #[test]
    fn schedule_one_sided_limits_agree_at_warmup() {
        let (w, total, peak) = (10u64, 30u64, 2.0);
        let ramp = |s: f64| peak * s / w as f64;
        let decay = |s: f64| peak * (total as f64 - s) / (total - w) as f64;
        assert!((ramp(w as f64) - decay(w as f64)).abs() < 1e-15);
        assert_eq!(lr_at_step(w, w, total, peak).unwrap(), ramp(w as f64));
    }
}
