use super::{join, Module, Param};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of the sigmoid given its *output* `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |y, g| g * y * (T::one() - y))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its *input* `x`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Channel-wise parametric ReLU over `[B, C, ...]`.
#[derive(Clone, Debug)]
pub struct PRelu<T> {
    pub slope: Param<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            slope: Param::new(Tensor::full(&[channels], s(0.25))),
        }
    }

    fn plane(x: &Tensor<T>) -> usize {
        x.len() / (x.dim(0) * x.dim(1))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = x.dim(1);
        let hw = Self::plane(x);
        let a = self.slope.value.data();
        let mut y = x.clone();
        for (i, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
            let a = a[i % c];
            plane
                .iter_mut()
                .for_each(|v| *v = if *v > T::zero() { *v } else { a * *v });
        }
        y
    }

    /// Returns `(output, cache)`; the cache is the input.
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        (self.forward(x), x.clone())
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let c = x.dim(1);
        let hw = Self::plane(x);
        let mut dx = dy.clone();
        let a = self.slope.value.data().to_vec();
        let da = self.slope.grad.data_mut();
        for (i, (dplane, xplane)) in dx
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(x.data().chunks_exact(hw))
            .enumerate()
        {
            let ch = i % c;
            let mut acc = T::zero();
            for (g, &xv) in dplane.iter_mut().zip(xplane) {
                if xv <= T::zero() {
                    acc = acc + *g * xv;
                    *g = *g * a[ch];
                }
            }
            da[ch] = da[ch] + acc;
        }
        dx
    }
}

impl<T: Scalar> Module<T> for PRelu<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "slope"), &self.slope);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "slope"), &mut self.slope);
    }
}
