//! Minimal layer library with explicit forward/backward passes.
//!
//! Every layer exposes a pure `forward` for inference and a
//! `forward_train`/`backward` pair that threads an explicit cache. Gradients
//! accumulate into the layer's [`Param`]s; callers zero them between steps.

mod act;
mod conv;
mod linear;

pub use act::{relu, relu_backward, sigmoid, sigmoid_backward, PRelu};
pub use conv::{Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache};
pub use linear::Linear;

use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| s::<T>(rng.random_range(-bound..bound)))
            .collect();
        Self::new(Tensor::from_vec(shape, data))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named traversal over trainable parameters.
///
/// Names are dot-separated paths, stable across runs; checkpoints and the
/// optimizer key their state by them.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-channel spatial mean of `[B, C, H, W]` → `[B, C]`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.dim(0), x.dim(1));
    let hw = x.len() / (b * c);
    let inv = s::<T>(1.0 / hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], data)
}

/// Adjoint of [`avg_pool`]; `shape` is the pooled input's shape.
pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let hw: usize = shape[2..].iter().product();
    let inv = s::<T>(1.0 / hw as f64);
    let mut dx = Tensor::zeros(shape);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(dy.data()) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// `[B, C]` ++ `[B]` → `[B, C+1]`, the pooled-context-plus-SNR vector.
pub fn concat_scalar<T: Scalar>(x: &Tensor<T>, col: &[T]) -> Tensor<T> {
    let (b, c) = (x.dim(0), x.dim(1));
    assert_eq!(col.len(), b, "one scalar per batch row");
    let mut data = Vec::with_capacity(b * (c + 1));
    for (row, &v) in x.data().chunks_exact(c).zip(col) {
        data.extend_from_slice(row);
        data.push(v);
    }
    Tensor::from_vec(&[b, c + 1], data)
}

/// Splits the gradient of [`concat_scalar`] back into its two parts.
pub fn split_scalar<T: Scalar>(dy: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (b, c1) = (dy.dim(0), dy.dim(1));
    let mut dx = Vec::with_capacity(b * (c1 - 1));
    let mut dcol = Vec::with_capacity(b);
    for row in dy.data().chunks_exact(c1) {
        dx.extend_from_slice(&row[..c1 - 1]);
        dcol.push(row[c1 - 1]);
    }
    (Tensor::from_vec(&[b, c1 - 1], dx), dcol)
}
