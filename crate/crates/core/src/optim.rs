//! Adam with the canonical moment coefficients.

use crate::nn::{Module, Param};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter whose name passes `trainable`.
    pub fn step<M: Module<T> + ?Sized>(
        &mut self,
        model: &mut M,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2, eps) = (s::<T>(BETA1), s::<T>(BETA2), s::<T>(EPSILON));
        let step_size = s::<T>(lr / bc1);
        let inv_bc2 = s::<T>(1.0 / bc2);
        let first = &mut self.first_moment;
        let second = &mut self.second_moment;
        model.visit_mut("", &mut |name: &str, p: &mut Param<T>| {
            if !trainable(name) {
                return;
            }
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        });
    }
}
