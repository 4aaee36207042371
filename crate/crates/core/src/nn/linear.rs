use super::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Fully connected layer over `[B, in]`, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in_uniform(&[outputs, inputs], inputs, rng),
            bias: Param::fan_in_uniform(&[outputs], inputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, i, o) = (x.dim(0), self.inputs(), self.outputs());
        assert_eq!(x.dim(1), i, "linear input width");
        let mut y = Vec::with_capacity(b * o);
        for _ in 0..b {
            y.extend_from_slice(self.bias.value.data());
        }
        // y[b, o] += x[b, i] * W^T[i, o]
        T::gemm(
            b,
            i,
            o,
            T::one(),
            x.data(),
            (i as isize, 1),
            self.weight.value.data(),
            (1, i as isize),
            T::one(),
            &mut y,
        );
        Tensor::from_vec(&[b, o], y)
    }

    /// `x` is the input seen by `forward`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (b, i, o) = (x.dim(0), self.inputs(), self.outputs());
        // dW[o, i] += dy^T[o, b] * x[b, i]
        T::gemm(
            o,
            b,
            i,
            T::one(),
            dy.data(),
            (1, o as isize),
            x.data(),
            (i as isize, 1),
            T::one(),
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for row in dy.data().chunks_exact(o) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        let mut dx = vec![T::zero(); b * i];
        T::gemm(
            b,
            o,
            i,
            T::one(),
            dy.data(),
            (o as isize, 1),
            self.weight.value.data(),
            (i as isize, 1),
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&[b, i], dx)
    }

    /// Zeroes weights and biases.
    pub fn clear(&mut self) {
        self.weight.value.fill(T::zero());
        self.bias.value.fill(T::zero());
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
