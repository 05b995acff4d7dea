use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn rmsprop(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            lr,
            rho: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::rmsprop(lr)
        }
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Per-parameter accumulators for one optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    step: u64,
    slots: BTreeMap<ParamId, Slot<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor in `group` from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, group: &[ParamId]) -> Result<()> {
        for &id in group {
            let p = store.get(id);
            if p.trainable && p.grad.is_none() {
                return Err(Error::InvalidState(format!("no gradient for {}", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let (bc1, bc2) = (
            T::lit(1.0 - c.beta1.powi(self.step as i32)),
            T::lit(1.0 - c.beta2.powi(self.step as i32)),
        );
        for &id in group {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let slot = self.slots.entry(id).or_insert_with(|| Slot {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let grad = p.grad.as_ref().expect("checked above");
            let theta = p.value.data_mut();
            match c.kind {
                OptimizerKind::Rmsprop => {
                    let rho = T::lit(c.rho);
                    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(slot.v.iter_mut()) {
                        *v = rho * *v + (T::one() - rho) * g * g;
                        *t -= lr * g / (v.sqrt() + eps);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                    for (((t, &g), m), v) in theta.iter_mut().zip(grad).zip(slot.m.iter_mut()).zip(slot.v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *t -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_step(cfg: OptimizerConfig, g: f64) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.0));
        store.get_mut(id).grad = Some(vec![g]);
        let mut opt = OptimizerState::new(cfg);
        opt.step(&mut store, &[id]).unwrap();
        store.value(id).item()
    }

    #[test]
    fn adam_first_step() {
        let t = one_step(OptimizerConfig::adam(1e-3), 1.0);
        assert!((t + 1e-3).abs() < 1e-10, "{t}");
    }

    #[test]
    fn rmsprop_first_step() {
        let t = one_step(OptimizerConfig::rmsprop(1e-3), 1.0);
        let expect = -1e-3 / (0.01f64.sqrt() + 1e-8);
        assert!((t - expect).abs() < 1e-15, "{t}");
        assert!((t + 0.01).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        assert_eq!(one_step(OptimizerConfig::adam(1e-3), 0.0), 0.0);
        assert_eq!(one_step(OptimizerConfig::rmsprop(1e-3), 0.0), 0.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3));
        assert!(matches!(opt.step(&mut store, &[id]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.5));
        store.set_trainable(id, false);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3));
        opt.step(&mut store, &[id]).unwrap();
        assert_eq!(store.value(id).item(), 0.5);
    }
}
