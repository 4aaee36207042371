//! Neural source and channel codecs.
//!
//! * Source encoder: two stride-2 5×5 convolutions with PReLU (3 → hidden → C_s).
//! * Source decoder: two stride-2 5×5 transposed convolutions, PReLU between,
//!   sigmoid output.
//! * Channel encoder: `[ResBlock, SnrAdaptive] × 2`, then a 1×1 projection whose
//!   output is reshaped into `G` groups of length `L`.
//! * Channel decoder: the encoder in reverse, starting from the zero-padded groups.

use crate::channel::GroupLayout;
use crate::nn::{
    avg_pool, avg_pool_backward, concat_scalar, join, relu, relu_backward, sigmoid,
    sigmoid_backward, split_scalar, Conv2d, ConvTranspose2d, Linear, Module, PRelu, Param,
};
use crate::nn::{ConvCache, ConvTransposeCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Channel-wise scale and shift computed from pooled features and the SNR.
///
/// `y = f ⊙ sigmoid(MLP_s(ctx)) + MLP_b(ctx)` with `ctx = [avgpool(f), snr]`.
#[derive(Clone, Debug)]
pub struct SnrAdaptive<T> {
    pub scale_hidden: Linear<T>,
    pub scale_out: Linear<T>,
    pub shift_hidden: Linear<T>,
    pub shift_out: Linear<T>,
}

pub struct SnrAdaptiveCache<T> {
    input: Tensor<T>,
    context: Tensor<T>,
    scale_pre: Tensor<T>,
    scale_act: Tensor<T>,
    scale: Tensor<T>,
    shift_pre: Tensor<T>,
    shift_act: Tensor<T>,
}

impl<T: Scalar> SnrAdaptive<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            scale_hidden: Linear::new(channels + 1, channels, rng),
            scale_out: Linear::new(channels, channels, rng),
            shift_hidden: Linear::new(channels + 1, channels, rng),
            shift_out: Linear::new(channels, channels, rng),
        }
    }

    pub fn forward(&self, f: &Tensor<T>, snr: &[T]) -> Tensor<T> {
        self.forward_train(f, snr).0
    }

    pub fn forward_train(&self, f: &Tensor<T>, snr: &[T]) -> (Tensor<T>, SnrAdaptiveCache<T>) {
        let context = concat_scalar(&avg_pool(f), snr);
        let scale_pre = self.scale_hidden.forward(&context);
        let scale_act = relu(&scale_pre);
        let scale = sigmoid(&self.scale_out.forward(&scale_act));
        let shift_pre = self.shift_hidden.forward(&context);
        let shift_act = relu(&shift_pre);
        let shift = self.shift_out.forward(&shift_act);

        let c = f.dim(1);
        let hw = f.len() / (f.dim(0) * c);
        let mut y = f.clone();
        for (i, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
            let (sc, sh) = (scale.data()[i], shift.data()[i]);
            plane.iter_mut().for_each(|v| *v = *v * sc + sh);
        }
        (
            y,
            SnrAdaptiveCache {
                input: f.clone(),
                context,
                scale_pre,
                scale_act,
                scale,
                shift_pre,
                shift_act,
            },
        )
    }

    pub fn backward(&mut self, cache: &SnrAdaptiveCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let f = &cache.input;
        let (b, c) = (f.dim(0), f.dim(1));
        let hw = f.len() / (b * c);
        let mut df = dy.clone();
        let mut dscale = Tensor::zeros(&[b, c]);
        let mut dshift = Tensor::zeros(&[b, c]);
        for (i, (dplane, fplane)) in df
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(f.data().chunks_exact(hw))
            .enumerate()
        {
            let sc = cache.scale.data()[i];
            let mut ds = T::zero();
            let mut dsh = T::zero();
            for (d, &fv) in dplane.iter_mut().zip(fplane) {
                ds = ds + *d * fv;
                dsh = dsh + *d;
                *d = *d * sc;
            }
            dscale.data_mut()[i] = ds;
            dshift.data_mut()[i] = dsh;
        }
        let dscale_logit = sigmoid_backward(&cache.scale, &dscale);
        let da = self.scale_out.backward(&cache.scale_act, &dscale_logit);
        let dctx_s = self
            .scale_hidden
            .backward(&cache.context, &relu_backward(&cache.scale_pre, &da));
        let db = self.shift_out.backward(&cache.shift_act, &dshift);
        let mut dctx = self
            .shift_hidden
            .backward(&cache.context, &relu_backward(&cache.shift_pre, &db));
        dctx.add_assign(&dctx_s);
        let (dpool, _dsnr) = split_scalar(&dctx);
        df.add_assign(&avg_pool_backward(&dpool, f.shape()));
        df
    }
}

impl<T: Scalar> Module<T> for SnrAdaptive<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.scale_hidden.visit(&join(prefix, "scale_hidden"), f);
        self.scale_out.visit(&join(prefix, "scale_out"), f);
        self.shift_hidden.visit(&join(prefix, "shift_hidden"), f);
        self.shift_out.visit(&join(prefix, "shift_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.scale_hidden.visit_mut(&join(prefix, "scale_hidden"), f);
        self.scale_out.visit_mut(&join(prefix, "scale_out"), f);
        self.shift_hidden.visit_mut(&join(prefix, "shift_hidden"), f);
        self.shift_out.visit_mut(&join(prefix, "shift_out"), f);
    }
}

/// `x + conv(prelu(conv(x)))` with 3×3 stride-1 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub act: PRelu<T>,
    pub conv2: Conv2d<T>,
}

pub struct ResBlockCache<T> {
    c1: ConvCache<T>,
    a: Tensor<T>,
    c2: ConvCache<T>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            act: PRelu::new(channels),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv2.forward(&self.act.forward(&self.conv1.forward(x)));
        y.add_assign(x);
        y
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, ResBlockCache<T>) {
        let (h, c1) = self.conv1.forward_train(x);
        let (a_out, a) = self.act.forward_train(&h);
        let (mut y, c2) = self.conv2.forward_train(&a_out);
        y.add_assign(x);
        (y, ResBlockCache { c1, a, c2 })
    }

    pub fn backward(&mut self, cache: &ResBlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let da = self.conv2.backward(&cache.c2, dy);
        let dh = self.act.backward(&cache.a, &da);
        let mut dx = self.conv1.backward(&cache.c1, &dh);
        dx.add_assign(dy);
        dx
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.act.visit(&join(prefix, "act"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.act.visit_mut(&join(prefix, "act"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct SourceEncoder<T> {
    pub conv1: Conv2d<T>,
    pub act1: PRelu<T>,
    pub conv2: Conv2d<T>,
    pub act2: PRelu<T>,
}

pub struct SourceEncoderCache<T> {
    c1: ConvCache<T>,
    a1: Tensor<T>,
    c2: ConvCache<T>,
    a2: Tensor<T>,
}

impl<T: Scalar> SourceEncoder<T> {
    pub fn new(hidden: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(3, hidden, 5, 2, 2, rng),
            act1: PRelu::new(hidden),
            conv2: Conv2d::new(hidden, channels, 5, 2, 2, rng),
            act2: PRelu::new(channels),
        }
    }

    /// `[B, 3, H, W]` → `[B, C_s, H/4, W/4]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.act2
            .forward(&self.conv2.forward(&self.act1.forward(&self.conv1.forward(x))))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, SourceEncoderCache<T>) {
        let (h1, c1) = self.conv1.forward_train(x);
        let (o1, a1) = self.act1.forward_train(&h1);
        let (h2, c2) = self.conv2.forward_train(&o1);
        let (y, a2) = self.act2.forward_train(&h2);
        (y, SourceEncoderCache { c1, a1, c2, a2 })
    }

    pub fn backward(&mut self, cache: &SourceEncoderCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.act2.backward(&cache.a2, dy);
        let d = self.conv2.backward(&cache.c2, &d);
        let d = self.act1.backward(&cache.a1, &d);
        self.conv1.backward(&cache.c1, &d)
    }
}

impl<T: Scalar> Module<T> for SourceEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.act1.visit(&join(prefix, "act1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.act2.visit(&join(prefix, "act2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.act1.visit_mut(&join(prefix, "act1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.act2.visit_mut(&join(prefix, "act2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct SourceDecoder<T> {
    pub deconv1: ConvTranspose2d<T>,
    pub act1: PRelu<T>,
    pub deconv2: ConvTranspose2d<T>,
}

pub struct SourceDecoderCache<T> {
    d1: ConvTransposeCache<T>,
    a1: Tensor<T>,
    d2: ConvTransposeCache<T>,
    out: Tensor<T>,
}

impl<T: Scalar> SourceDecoder<T> {
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            deconv1: ConvTranspose2d::new(channels, hidden, 5, 2, 2, 1, rng),
            act1: PRelu::new(hidden),
            deconv2: ConvTranspose2d::new(hidden, 3, 5, 2, 2, 1, rng),
        }
    }

    /// Pixels in (0, 1).
    pub fn forward(&self, fs: &Tensor<T>) -> Tensor<T> {
        sigmoid(&self.deconv2.forward(&self.act1.forward(&self.deconv1.forward(fs))))
    }

    pub fn forward_train(&self, fs: &Tensor<T>) -> (Tensor<T>, SourceDecoderCache<T>) {
        let (h1, d1) = self.deconv1.forward_train(fs);
        let (o1, a1) = self.act1.forward_train(&h1);
        let (h2, d2) = self.deconv2.forward_train(&o1);
        let out = sigmoid(&h2);
        (
            out.clone(),
            SourceDecoderCache { d1, a1, d2, out },
        )
    }

    pub fn backward(&mut self, cache: &SourceDecoderCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = sigmoid_backward(&cache.out, dy);
        let d = self.deconv2.backward(&cache.d2, &d);
        let d = self.act1.backward(&cache.a1, &d);
        self.deconv1.backward(&cache.d1, &d)
    }
}

impl<T: Scalar> Module<T> for SourceDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.deconv1.visit(&join(prefix, "deconv1"), f);
        self.act1.visit(&join(prefix, "act1"), f);
        self.deconv2.visit(&join(prefix, "deconv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.deconv1.visit_mut(&join(prefix, "deconv1"), f);
        self.act1.visit_mut(&join(prefix, "act1"), f);
        self.deconv2.visit_mut(&join(prefix, "deconv2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ChannelEncoder<T> {
    pub res1: ResBlock<T>,
    pub adapt1: SnrAdaptive<T>,
    pub res2: ResBlock<T>,
    pub adapt2: SnrAdaptive<T>,
    pub project: Conv2d<T>,
    pub layout: GroupLayout,
}

pub struct ChannelEncoderCache<T> {
    r1: ResBlockCache<T>,
    s1: SnrAdaptiveCache<T>,
    r2: ResBlockCache<T>,
    s2: SnrAdaptiveCache<T>,
    p: ConvCache<T>,
    projected_shape: Vec<usize>,
}

impl<T: Scalar> ChannelEncoder<T> {
    pub fn new(channels: usize, projection: usize, layout: GroupLayout, rng: &mut impl Rng) -> Self {
        Self {
            res1: ResBlock::new(channels, rng),
            adapt1: SnrAdaptive::new(channels, rng),
            res2: ResBlock::new(channels, rng),
            adapt2: SnrAdaptive::new(channels, rng),
            project: Conv2d::new(channels, projection, 1, 1, 0, rng),
            layout,
        }
    }

    fn to_groups(&self, y: Tensor<T>) -> Tensor<T> {
        let b = y.dim(0);
        y.reshape(&[b, self.layout.groups(), self.layout.length])
    }

    /// `[B, C_s, h, w]` → `[B, G, L]`.
    pub fn forward(&self, xs: &Tensor<T>, snr: &[T]) -> Tensor<T> {
        let h = self.res1.forward(xs);
        let h = self.adapt1.forward(&h, snr);
        let h = self.res2.forward(&h);
        let h = self.adapt2.forward(&h, snr);
        self.to_groups(self.project.forward(&h))
    }

    pub fn forward_train(&self, xs: &Tensor<T>, snr: &[T]) -> (Tensor<T>, ChannelEncoderCache<T>) {
        let (h, r1) = self.res1.forward_train(xs);
        let (h, s1) = self.adapt1.forward_train(&h, snr);
        let (h, r2) = self.res2.forward_train(&h);
        let (h, s2) = self.adapt2.forward_train(&h, snr);
        let (y, p) = self.project.forward_train(&h);
        let projected_shape = y.shape().to_vec();
        (
            self.to_groups(y),
            ChannelEncoderCache {
                r1,
                s1,
                r2,
                s2,
                p,
                projected_shape,
            },
        )
    }

    pub fn backward(&mut self, cache: &ChannelEncoderCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = dy.clone().reshape(&cache.projected_shape);
        let d = self.project.backward(&cache.p, &d);
        let d = self.adapt2.backward(&cache.s2, &d);
        let d = self.res2.backward(&cache.r2, &d);
        let d = self.adapt1.backward(&cache.s1, &d);
        self.res1.backward(&cache.r1, &d)
    }
}

impl<T: Scalar> Module<T> for ChannelEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.res1.visit(&join(prefix, "res1"), f);
        self.adapt1.visit(&join(prefix, "adapt1"), f);
        self.res2.visit(&join(prefix, "res2"), f);
        self.adapt2.visit(&join(prefix, "adapt2"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.res1.visit_mut(&join(prefix, "res1"), f);
        self.adapt1.visit_mut(&join(prefix, "adapt1"), f);
        self.res2.visit_mut(&join(prefix, "res2"), f);
        self.adapt2.visit_mut(&join(prefix, "adapt2"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ChannelDecoder<T> {
    pub expand: Conv2d<T>,
    pub adapt1: SnrAdaptive<T>,
    pub res1: ResBlock<T>,
    pub adapt2: SnrAdaptive<T>,
    pub res2: ResBlock<T>,
    /// `[projection, h, w]` spatial shape the groups are folded back into.
    pub spatial: [usize; 3],
}

pub struct ChannelDecoderCache<T> {
    e: ConvCache<T>,
    s1: SnrAdaptiveCache<T>,
    r1: ResBlockCache<T>,
    s2: SnrAdaptiveCache<T>,
    r2: ResBlockCache<T>,
    group_shape: Vec<usize>,
}

impl<T: Scalar> ChannelDecoder<T> {
    pub fn new(spatial: [usize; 3], channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            expand: Conv2d::new(spatial[0], channels, 1, 1, 0, rng),
            adapt1: SnrAdaptive::new(channels, rng),
            res1: ResBlock::new(channels, rng),
            adapt2: SnrAdaptive::new(channels, rng),
            res2: ResBlock::new(channels, rng),
            spatial,
        }
    }

    fn unfold(&self, padded: &Tensor<T>) -> Tensor<T> {
        let b = padded.dim(0);
        let [c, h, w] = self.spatial;
        padded.clone().reshape(&[b, c, h, w])
    }

    /// `[B, G, L]` → `[B, C_s, h, w]`.
    pub fn forward(&self, padded: &Tensor<T>, snr: &[T]) -> Tensor<T> {
        let h = self.expand.forward(&self.unfold(padded));
        let h = self.adapt1.forward(&h, snr);
        let h = self.res1.forward(&h);
        let h = self.adapt2.forward(&h, snr);
        self.res2.forward(&h)
    }

    pub fn forward_train(&self, padded: &Tensor<T>, snr: &[T]) -> (Tensor<T>, ChannelDecoderCache<T>) {
        let (h, e) = self.expand.forward_train(&self.unfold(padded));
        let (h, s1) = self.adapt1.forward_train(&h, snr);
        let (h, r1) = self.res1.forward_train(&h);
        let (h, s2) = self.adapt2.forward_train(&h, snr);
        let (y, r2) = self.res2.forward_train(&h);
        (
            y,
            ChannelDecoderCache {
                e,
                s1,
                r1,
                s2,
                r2,
                group_shape: padded.shape().to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: &ChannelDecoderCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.res2.backward(&cache.r2, dy);
        let d = self.adapt2.backward(&cache.s2, &d);
        let d = self.res1.backward(&cache.r1, &d);
        let d = self.adapt1.backward(&cache.s1, &d);
        self.expand.backward(&cache.e, &d).reshape(&cache.group_shape)
    }
}

impl<T: Scalar> Module<T> for ChannelDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.adapt1.visit(&join(prefix, "adapt1"), f);
        self.res1.visit(&join(prefix, "res1"), f);
        self.adapt2.visit(&join(prefix, "adapt2"), f);
        self.res2.visit(&join(prefix, "res2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.adapt1.visit_mut(&join(prefix, "adapt1"), f);
        self.res1.visit_mut(&join(prefix, "res1"), f);
        self.adapt2.visit_mut(&join(prefix, "adapt2"), f);
        self.res2.visit_mut(&join(prefix, "res2"), f);
    }
}
