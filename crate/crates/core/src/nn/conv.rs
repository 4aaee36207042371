use super::{join, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Sliding-window geometry between an image plane and a conv output plane.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position (oy, ox) and kernel tap (ki, kj).
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// `[B, C, H, W]` → columns `[C*k*k, B*out_h*out_w]`.
    fn im2col<T: Scalar>(&self, x: &[T], batch: usize) -> Vec<T> {
        let n = batch * self.out_plane();
        let plane = self.height * self.width;
        let mut cols = vec![T::zero(); self.rows() * n];
        for b in 0..batch {
            for c in 0..self.channels {
                let img = &x[(b * self.channels + c) * plane..][..plane];
                for ki in 0..self.kernel {
                    for kj in 0..self.kernel {
                        let row = (c * self.kernel + ki) * self.kernel + kj;
                        let dst = &mut cols[row * n + b * self.out_plane()..][..self.out_plane()];
                        for oy in 0..self.out_h {
                            for ox in 0..self.out_w {
                                if let Some((y, x)) = self.source(oy, ox, ki, kj) {
                                    dst[oy * self.out_w + ox] = img[y * self.width + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Window::im2col`]: scatter-adds columns back into an image.
    fn col2im<T: Scalar>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let n = batch * self.out_plane();
        let plane = self.height * self.width;
        let mut x = vec![T::zero(); batch * self.channels * plane];
        for b in 0..batch {
            for c in 0..self.channels {
                let img = &mut x[(b * self.channels + c) * plane..][..plane];
                for ki in 0..self.kernel {
                    for kj in 0..self.kernel {
                        let row = (c * self.kernel + ki) * self.kernel + kj;
                        let src = &cols[row * n + b * self.out_plane()..][..self.out_plane()];
                        for oy in 0..self.out_h {
                            for ox in 0..self.out_w {
                                if let Some((y, x)) = self.source(oy, ox, ki, kj) {
                                    let v = &mut img[y * self.width + x];
                                    *v = *v + src[oy * self.out_w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `[B, C, P]` → `[C, B*P]`.
fn to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[c * batch * plane + b * plane..][..plane]
                .copy_from_slice(&x[(b * channels + c) * plane..][..plane]);
        }
    }
    out
}

/// `[C, B*P]` → `[B, C, P]`, adding `bias[c]` on the way.
fn from_channel_major<T: Scalar>(
    m: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &m[c * batch * plane + b * plane..][..plane];
            let dst = &mut out[(b * channels + c) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias[c];
            }
        }
    }
    out
}

fn accumulate_bias<T: Scalar>(db: &mut [T], dy: &[T], channels: usize, plane: usize) {
    for (i, p) in dy.chunks_exact(plane).enumerate() {
        let c = i % channels;
        db[c] = db[c] + p.iter().copied().sum::<T>();
    }
}

/// 2-D convolution, weight `[C_out, C_in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Columns saved by [`Conv2d::forward_train`].
pub struct ConvCache<T> {
    cols: Vec<T>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::fan_in_uniform(&[out_channels], fan_in, rng),
            stride,
            pad,
        }
    }

    fn window(&self, shape: &[usize]) -> Window {
        let w = self.weight.value.shape();
        assert_eq!(shape[1], w[1], "conv input channels");
        let k = w[2];
        Window {
            channels: w[1],
            height: shape[2],
            width: shape[3],
            kernel: k,
            stride: self.stride,
            pad: self.pad,
            out_h: (shape[2] + 2 * self.pad - k) / self.stride + 1,
            out_w: (shape[3] + 2 * self.pad - k) / self.stride + 1,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let batch = x.dim(0);
        let win = self.window(x.shape());
        let cout = self.weight.value.dim(0);
        let cols = win.im2col(x.data(), batch);
        let n = batch * win.out_plane();
        let mut out = vec![T::zero(); cout * n];
        T::gemm(
            cout,
            win.rows(),
            n,
            T::one(),
            self.weight.value.data(),
            (win.rows() as isize, 1),
            &cols,
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let y = from_channel_major(&out, batch, cout, win.out_plane(), self.bias.value.data());
        (
            Tensor::from_vec(&[batch, cout, win.out_h, win.out_w], y),
            ConvCache {
                cols,
                input_shape: x.shape().to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let batch = cache.input_shape[0];
        let win = self.window(&cache.input_shape);
        let cout = self.weight.value.dim(0);
        let n = batch * win.out_plane();
        accumulate_bias(self.bias.grad.data_mut(), dy.data(), cout, win.out_plane());
        let dym = to_channel_major(dy.data(), batch, cout, win.out_plane());
        // dW[cout, K] += dy[cout, n] * cols^T[n, K]
        T::gemm(
            cout,
            n,
            win.rows(),
            T::one(),
            &dym,
            (n as isize, 1),
            &cache.cols,
            (1, n as isize),
            T::one(),
            self.weight.grad.data_mut(),
        );
        // dcols[K, n] = W^T[K, cout] * dy[cout, n]
        let mut dcols = vec![T::zero(); win.rows() * n];
        T::gemm(
            win.rows(),
            cout,
            n,
            T::one(),
            self.weight.value.data(),
            (1, win.rows() as isize),
            &dym,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
        );
        Tensor::from_vec(&cache.input_shape, win.col2im(&dcols, batch))
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed 2-D convolution, weight `[C_in, C_out, k, k]`.
///
/// Output size is `(in - 1) * stride - 2 * pad + k + output_pad`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

pub struct ConvTransposeCache<T> {
    input: Vec<T>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        Self {
            weight: Param::fan_in_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
            bias: Param::fan_in_uniform(&[out_channels], fan_in, rng),
            stride,
            pad,
            output_pad,
        }
    }

    /// Window over the *output* image whose conv-output plane is the input.
    fn window(&self, shape: &[usize]) -> Window {
        let w = self.weight.value.shape();
        assert_eq!(shape[1], w[0], "transposed conv input channels");
        let k = w[2];
        let grow = |n: usize| (n - 1) * self.stride + k + self.output_pad - 2 * self.pad;
        Window {
            channels: w[1],
            height: grow(shape[2]),
            width: grow(shape[3]),
            kernel: k,
            stride: self.stride,
            pad: self.pad,
            out_h: shape[2],
            out_w: shape[3],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, ConvTransposeCache<T>) {
        let batch = x.dim(0);
        let cin = x.dim(1);
        let win = self.window(x.shape());
        let n = batch * win.out_plane();
        let xm = to_channel_major(x.data(), batch, cin, win.out_plane());
        // cols[K, n] = W^T[K, cin] * x[cin, n]
        let mut cols = vec![T::zero(); win.rows() * n];
        T::gemm(
            win.rows(),
            cin,
            n,
            T::one(),
            self.weight.value.data(),
            (1, win.rows() as isize),
            &xm,
            (n as isize, 1),
            T::zero(),
            &mut cols,
        );
        let mut y = win.col2im(&cols, batch);
        let plane = win.height * win.width;
        let bias = self.bias.value.data();
        for (i, p) in y.chunks_exact_mut(plane).enumerate() {
            let b = bias[i % win.channels];
            p.iter_mut().for_each(|v| *v = *v + b);
        }
        (
            Tensor::from_vec(&[batch, win.channels, win.height, win.width], y),
            ConvTransposeCache {
                input: xm,
                input_shape: x.shape().to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let batch = cache.input_shape[0];
        let cin = cache.input_shape[1];
        let win = self.window(&cache.input_shape);
        let n = batch * win.out_plane();
        accumulate_bias(
            self.bias.grad.data_mut(),
            dy.data(),
            win.channels,
            win.height * win.width,
        );
        let dcols = win.im2col(dy.data(), batch);
        // dW[cin, K] += x[cin, n] * dcols^T[n, K]
        T::gemm(
            cin,
            n,
            win.rows(),
            T::one(),
            &cache.input,
            (n as isize, 1),
            &dcols,
            (1, n as isize),
            T::one(),
            self.weight.grad.data_mut(),
        );
        // dx[cin, n] = W[cin, K] * dcols[K, n]
        let mut dxm = vec![T::zero(); cin * n];
        T::gemm(
            cin,
            win.rows(),
            n,
            T::one(),
            self.weight.value.data(),
            (win.rows() as isize, 1),
            &dcols,
            (n as isize, 1),
            T::zero(),
            &mut dxm,
        );
        let zeros = vec![T::zero(); cin];
        Tensor::from_vec(
            &cache.input_shape,
            from_channel_major(&dxm, batch, cin, win.out_plane(), &zeros),
        )
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
