//! Adam with decoupled weight decay, cosine learning-rate annealing, and backbone
//! freezing for the first iterations.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::BACKBONE_PREFIX;
use crate::nn::{Module, SlotMut, TrainableMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_base: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub freeze_iters: u64,
    /// Hold `lr_base` instead of annealing.
    pub constant: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr_base: 3.5e-4,
            lr_min: 7.7e-6,
            total_steps: 1,
            freeze_iters: 0,
            constant: false,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if !(0.0..=self.lr_base).contains(&self.lr_min) {
            return Err(Error::config("optim.lr_min", "must lie in [0, optim.lr]"));
        }
        if self.total_steps > 0 && self.freeze_iters >= self.total_steps {
            return Err(Error::config("optim.freeze_iters", "must be below the total step count"));
        }
        Ok(())
    }
}

/// `lr_min + (lr_base - lr_min) (1 + cos(pi t / T)) / 2`; steps past `T` hold `lr_min`.
pub fn cosine_lr(t: u64, s: &Schedule) -> f64 {
    if s.constant {
        return s.lr_base;
    }
    if s.total_steps == 0 || t >= s.total_steps {
        return s.lr_min;
    }
    let frac = t as f64 / s.total_steps as f64;
    s.lr_min + 0.5 * (s.lr_base - s.lr_min) * (1.0 + (PI * frac).cos())
}

/// Backbone frozen while `t < freeze_iters`.
pub fn apply_freeze(t: u64, s: &Schedule) -> TrainableMask {
    if t < s.freeze_iters {
        TrainableMask::freeze_prefix(BACKBONE_PREFIX)
    } else {
        TrainableMask::all()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Completed steps.
    pub t: u64,
    /// Moments by parameter name.
    pub state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update of every parameter the mask allows. Allowed parameters without
    /// a gradient entry are treated as having a zero gradient.
    pub fn step<M: Module<T>>(
        &mut self,
        model: &mut M,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        mask: &TrainableMask,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c = self.cfg;
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(c.eps));
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(lr * c.weight_decay);
        let mut failure = None;
        model.visit_mut(&mut |slot| {
            let SlotMut::Param(p) = slot else { return };
            if failure.is_some() || !mask.allows(p) {
                return;
            }
            let shape = p.value.shape().to_vec();
            let g = grads.get(&p.name);
            if let Some(g) = g {
                if g.shape() != shape.as_slice() {
                    failure = Some(Error::Contract(format!(
                        "gradient for `{}` has shape {:?}, parameter is {:?}",
                        p.name,
                        g.shape(),
                        shape
                    )));
                    return;
                }
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape.clone()),
            });
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
                theta[i] = theta[i] - decay * theta[i];
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Slot};

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, f64>)) {
            f(Slot::Param(&self.0));
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(SlotMut<'_, f64>)) {
            f(SlotMut::Param(&mut self.0));
        }
    }

    fn grads(g: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec([g.len()], g.to_vec()).unwrap())])
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { lr_base: 1.0, lr_min: 0.2, total_steps: 10, ..Default::default() };
        assert_eq!(cosine_lr(0, &s), 1.0);
        assert!((cosine_lr(10, &s) - 0.2).abs() < 1e-15);
        assert!((cosine_lr(5, &s) - 0.6).abs() < 1e-12);
        assert_eq!(cosine_lr(99, &s), 0.2);
        assert_eq!(cosine_lr(7, &Schedule { constant: true, ..s }), 1.0);
    }

    #[test]
    fn freeze_boundary() {
        let s = Schedule { freeze_iters: 3, total_steps: 10, ..Default::default() };
        assert!(!apply_freeze(2, &s).is_all_trainable());
        assert!(apply_freeze(3, &s).is_all_trainable());
        let s0 = Schedule { total_steps: 10, ..Default::default() };
        assert!((0..10).all(|t| apply_freeze(t, &s0).is_all_trainable()));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut m = One(Param::new("w", Tensor::from_vec([2], vec![1.0, -2.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut m, &grads(&[0.0, 0.0]), 0.1, &TrainableMask::all()).unwrap();
        let k = 1.0 - 0.1 * 5e-4;
        assert!((m.0.value.data()[0] - k).abs() < 1e-15);
        assert!((m.0.value.data()[1] + 2.0 * k).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut m = One(Param::new("w", Tensor::zeros([3])));
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut m, &grads(&[3.0, -0.5, 1e-2]), 0.01, &TrainableMask::all()).unwrap();
        for (v, s) in m.0.value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 0.01).abs() < 1e-8, "{v}");
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn masked_and_mismatched() {
        let mut m = One(Param::new("backbone.w", Tensor::ones([2])));
        let mut opt = Adam::new(AdamConfig::default());
        let g = BTreeMap::from([("backbone.w".to_string(), Tensor::ones([2]))]);
        opt.step(&mut m, &g, 0.1, &TrainableMask::freeze_prefix(BACKBONE_PREFIX)).unwrap();
        assert_eq!(m.0.value.data(), &[1.0, 1.0]);
        let bad = BTreeMap::from([("backbone.w".to_string(), Tensor::ones([3]))]);
        assert!(matches!(opt.step(&mut m, &bad, 0.1, &TrainableMask::all()), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule { freeze_iters: 5, total_steps: 5, ..Default::default() }.validate().is_err());
        assert!(Schedule { lr_min: 1.0, ..Default::default() }.validate().is_err());
        assert!(Schedule::default().validate().is_ok());
    }
}
