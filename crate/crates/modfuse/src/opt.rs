//! Adaptive moment-estimation optimizer over named parameter tensors.
//!
//! State is keyed by parameter name (the same names a `ParamRegistry` bind
//! produces), so a gradient map from a backward pass can be applied directly
//! and the slots can round-trip through checkpoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S: Scalar> {
    t: u64,
    slots: BTreeMap<String, AdamSlot<S>>,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Adam::new()
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam { t: 0, slots: BTreeMap::new() }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient entry.
    /// Parameters absent from `grads` (e.g. components an ablation preset
    /// never touches) are left untouched, slots included.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, &mut Tensor<S>)],
        grads: &BTreeMap<String, Vec<S>>,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2, eps) = (c::<S>(ADAM_BETA1), c::<S>(ADAM_BETA2), c::<S>(ADAM_EPS));
        let lr = c::<S>(lr);
        // bias corrections 1 - beta^t
        let bc1 = S::one() - b1.powi(self.t as i32);
        let bc2 = S::one() - b2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = tensor.numel();
            if g.len() != n {
                return Err(Error::shape(
                    "adam_step",
                    format!("param `{name}` has {n} elements, gradient has {}", g.len()),
                ));
            }
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| AdamSlot { m: vec![S::zero(); n], v: vec![S::zero(); n] });
            if slot.m.len() != n {
                return Err(Error::shape(
                    "adam_step",
                    format!("param `{name}` has {n} elements, slot has {}", slot.m.len()),
                ));
            }
            let data = tensor.data_mut();
            for k in 0..n {
                let gk = g[k];
                slot.m[k] = b1 * slot.m[k] + (S::one() - b1) * gk;
                slot.v[k] = b2 * slot.v[k] + (S::one() - b2) * gk * gk;
                let mhat = slot.m[k] / bc1;
                let vhat = slot.v[k] / bc2;
                data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Slot contents, for checkpoint serialization.
    pub fn slots(&self) -> impl Iterator<Item = (&String, &AdamSlot<S>)> {
        self.slots.iter()
    }

    /// Restores checkpointed optimizer state.
    pub fn restore(&mut self, t: u64, slots: BTreeMap<String, AdamSlot<S>>) {
        self.t = t;
        self.slots = slots;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(adam: &mut Adam<f64>, lr: f64, p: &mut Tensor<f64>, g: f64) {
        let grads = BTreeMap::from([("p".to_string(), vec![g])]);
        let mut params = vec![("p".to_string(), &mut *p)];
        adam.step(lr, &mut params, &grads).unwrap();
    }

    #[test]
    fn first_step_size_is_lr_up_to_eps() {
        // At t=1 the bias-corrected ratio mhat/sqrt(vhat) is sign(g), so the
        // first update has magnitude ~lr regardless of gradient scale (the
        // 1e-8 denominator offset only matters once |g| nears it).
        for g in [1e-3, 1.0, 1e6] {
            let mut adam = Adam::new();
            let mut p = Tensor::scalar(0.0);
            step_scalar(&mut adam, 0.01, &mut p, g);
            assert!((p.data()[0] + 0.01).abs() < 1e-5, "g={g}: p={}", p.data()[0]);
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 3)^2 from p = 0
        let mut adam = Adam::new();
        let mut p = Tensor::scalar(0.0);
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 3.0);
            step_scalar(&mut adam, 0.05, &mut p, g);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3, "p = {}", p.data()[0]);
    }

    #[test]
    fn params_without_gradient_entries_are_untouched() {
        let mut adam = Adam::new();
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut q = Tensor::from_vec(vec![5.0]);
        let grads = BTreeMap::from([("p".to_string(), vec![1.0, 1.0])]);
        {
            let mut params = vec![("p".to_string(), &mut p), ("q".to_string(), &mut q)];
            adam.step(0.1, &mut params, &grads).unwrap();
        }
        assert_eq!(q.data(), &[5.0]);
        assert!(p.data()[0] < 1.0);
        assert!(adam.slots().count() == 1);
    }

    #[test]
    fn zero_lr_leaves_params_exactly_fixed() {
        let mut adam = Adam::new();
        let mut p = Tensor::from_vec(vec![1.25]);
        step_scalar(&mut adam, 0.0, &mut p, 3.0);
        assert_eq!(p.data(), &[1.25]);
        assert_eq!(adam.t(), 1);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut adam = Adam::new();
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let grads = BTreeMap::from([("p".to_string(), vec![1.0])]);
        let mut params = vec![("p".to_string(), &mut p)];
        assert!(matches!(adam.step(0.1, &mut params, &grads).unwrap_err(), Error::Shape { .. }));
    }
}
