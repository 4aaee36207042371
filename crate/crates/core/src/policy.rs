//! Rate-control policy: a categorical distribution over how many selective
//! groups to activate, Gumbel sampling with a straight-through estimator, and
//! the thermometer mask the decision turns into.

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool, avg_pool_backward, concat_scalar, join, relu, relu_backward, split_scalar, Linear,
    Module, Param,
};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-10;

/// Binary mask over the selective groups whose ones form a prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ThermometerMask {
    bits: Vec<bool>,
}

impl ThermometerMask {
    /// Validates monotonicity (`w_i >= w_{i+1}`).
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.windows(2).any(|w| !w[0] && w[1]) {
            return Err(Error::Argument(format!(
                "mask {bits:?} is not a thermometer code"
            )));
        }
        Ok(Self { bits })
    }

    pub fn from_count(active: usize, selective: usize) -> Self {
        assert!(active <= selective, "active count exceeds selective groups");
        Self {
            bits: (0..selective).map(|i| i < active).collect(),
        }
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Categorical probabilities over `{0, ..., G_s}` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDistribution<T> {
    pub probs: Vec<T>,
}

impl<T: Scalar> PolicyDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::Argument("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().map(|p| p.to_f64_lossy()).sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::Argument(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `log(max(p, LOG_CLAMP))`.
    pub fn clamped_log(&self) -> Vec<T> {
        let floor = s::<T>(LOG_CLAMP);
        self.probs.iter().map(|&p| p.max(floor).ln()).collect()
    }

    /// Most likely option, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Standard Gumbel noise `g_k = -log(-log U_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise<T> {
    pub g: Vec<T>,
}

impl<T: Scalar> GumbelNoise<T> {
    /// Draws `U_k` from the open interval (0, 1) so every `g_k` is finite.
    pub fn sample(len: usize, rng: &mut impl Rng) -> Self {
        let us: Vec<f64> = (0..len).map(|_| rng.sample(Open01)).collect();
        Self::from_uniforms(&us)
    }

    pub fn from_uniforms(us: &[f64]) -> Self {
        Self {
            g: us.iter().map(|&u| s::<T>(-(-u.ln()).ln())).collect(),
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            g: vec![T::zero(); len],
        }
    }
}

/// A hard decision: exactly one entry is one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHotDecision {
    pub index: usize,
    pub len: usize,
}

impl OneHotDecision {
    pub fn new(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Argument(format!("index {index} out of {len} options")));
        }
        Ok(Self { index, len })
    }

    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        (0..self.len)
            .map(|i| if i == self.index { T::one() } else { T::zero() })
            .collect()
    }
}

/// Gumbel-Softmax relaxation and the temperature that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedDecision<T> {
    pub simplex: Vec<T>,
    pub tau: T,
}

/// Hard value in the forward pass, relaxed gradient in the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StraightThrough<T> {
    /// Bit-identical to the hard one-hot decision.
    pub value: Vec<T>,
    pub hard: OneHotDecision,
    pub soft: RelaxedDecision<T>,
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn perturbed_logits<T: Scalar>(p: &PolicyDistribution<T>, noise: &GumbelNoise<T>) -> Result<Vec<T>> {
    if p.len() != noise.g.len() {
        return Err(Error::Argument(format!(
            "distribution has {} options but noise has {}",
            p.len(),
            noise.g.len()
        )));
    }
    Ok(p
        .clamped_log()
        .into_iter()
        .zip(&noise.g)
        .map(|(l, &g)| l + g)
        .collect())
}

/// Gumbel-Max: `argmax_k (log p_k + g_k)`.
pub fn gumbel_max_sample<T: Scalar>(
    p: &PolicyDistribution<T>,
    noise: &GumbelNoise<T>,
) -> Result<OneHotDecision> {
    let z = perturbed_logits(p, noise)?;
    OneHotDecision::new(argmax(&z), z.len())
}

fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total = total + *x;
    }
    v.iter_mut().for_each(|x| *x = *x / total);
}

/// `softmax((log p + g) / tau)`.
pub fn gumbel_softmax_relax<T: Scalar>(
    p: &PolicyDistribution<T>,
    noise: &GumbelNoise<T>,
    tau: T,
) -> Result<RelaxedDecision<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let mut z = perturbed_logits(p, noise)?;
    z.iter_mut().for_each(|v| *v = *v / tau);
    softmax_in_place(&mut z);
    Ok(RelaxedDecision { simplex: z, tau })
}

pub fn straight_through<T: Scalar>(
    hard: OneHotDecision,
    soft: RelaxedDecision<T>,
) -> Result<StraightThrough<T>> {
    if hard.len != soft.simplex.len() {
        return Err(Error::Argument(format!(
            "hard decision has {} entries but relaxation has {}",
            hard.len,
            soft.simplex.len()
        )));
    }
    Ok(StraightThrough {
        value: hard.to_vec(),
        hard,
        soft,
    })
}

/// Gradient of a loss w.r.t. the policy logits, given the loss gradient `dvalue`
/// w.r.t. the straight-through decision (routed through the relaxation).
pub fn straight_through_backward<T: Scalar>(
    p: &PolicyDistribution<T>,
    soft: &RelaxedDecision<T>,
    dvalue: &[T],
) -> Vec<T> {
    let simplex = &soft.simplex;
    let inner: T = simplex.iter().zip(dvalue).map(|(&a, &b)| a * b).sum();
    let floor = s::<T>(LOG_CLAMP);
    // d/d(log p), zero where the log clamp is active.
    let dlogp: Vec<T> = simplex
        .iter()
        .zip(dvalue)
        .zip(&p.probs)
        .map(|((&y, &g), &pk)| {
            if pk > floor {
                y * (g - inner) / soft.tau
            } else {
                T::zero()
            }
        })
        .collect();
    let total: T = dlogp.iter().copied().sum();
    dlogp
        .iter()
        .zip(&p.probs)
        .map(|(&d, &pk)| d - pk * total)
        .collect()
}

/// `w_k = sum_{i >= k} onehot_i` for `k = 1..=G_s`.
pub fn to_thermometer(d: OneHotDecision) -> ThermometerMask {
    ThermometerMask::from_count(d.index, d.len - 1)
}

/// [`to_thermometer`] as a linear map on an arbitrary (possibly relaxed) vector.
pub fn thermometer_linear<T: Scalar>(d: &[T]) -> Vec<T> {
    (1..d.len()).map(|k| d[k..].iter().copied().sum()).collect()
}

/// Adjoint of [`thermometer_linear`].
pub fn thermometer_linear_backward<T: Scalar>(dw: &[T]) -> Vec<T> {
    let mut dd = vec![T::zero(); dw.len() + 1];
    let mut acc = T::zero();
    for i in 1..dd.len() {
        acc = acc + dw[i - 1];
        dd[i] = acc;
    }
    dd
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial: f64,
    /// Exponential decay rate per epoch.
    pub decay: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            initial: 5.0,
            decay: 0.015,
            floor: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * (-self.decay * epoch as f64).exp()).max(self.floor)
    }
}

pub fn temperature_schedule(epoch: usize) -> f64 {
    TemperatureSchedule::default().at(epoch)
}

/// Two-layer MLP over pooled source features and the SNR, ending in a softmax.
#[derive(Clone, Debug)]
pub struct PolicyNet<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

pub struct PolicyCache<T> {
    input_shape: Vec<usize>,
    context: Tensor<T>,
    pre_act: Tensor<T>,
    act: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> PolicyNet<T> {
    pub fn new(channels: usize, hidden: usize, selective: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(channels + 1, hidden, rng),
            output: Linear::new(hidden, selective + 1, rng),
        }
    }

    pub fn options(&self) -> usize {
        self.output.outputs()
    }

    /// Probabilities `[B, G_s+1]`.
    pub fn forward(&self, xs: &Tensor<T>, snr: &[T]) -> Tensor<T> {
        self.forward_train(xs, snr).probs
    }

    pub fn distributions(&self, xs: &Tensor<T>, snr: &[T]) -> Vec<PolicyDistribution<T>> {
        let probs = self.forward(xs, snr);
        (0..probs.dim(0))
            .map(|b| PolicyDistribution {
                probs: probs.outer(b).to_vec(),
            })
            .collect()
    }

    pub fn forward_train(&self, xs: &Tensor<T>, snr: &[T]) -> PolicyCache<T> {
        let context = concat_scalar(&avg_pool(xs), snr);
        let pre_act = self.hidden.forward(&context);
        let act = relu(&pre_act);
        let mut probs = self.output.forward(&act);
        let k = probs.dim(1);
        probs
            .data_mut()
            .chunks_exact_mut(k)
            .for_each(softmax_in_place);
        PolicyCache {
            input_shape: xs.shape().to_vec(),
            context,
            pre_act,
            act,
            probs,
        }
    }

    /// Backpropagates logit gradients; returns the gradient w.r.t. `xs`.
    pub fn backward(&mut self, cache: &PolicyCache<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let dact = self.output.backward(&cache.act, dlogits);
        let dpre = relu_backward(&cache.pre_act, &dact);
        let dctx = self.hidden.backward(&cache.context, &dpre);
        let (dpool, _dsnr) = split_scalar(&dctx);
        avg_pool_backward(&dpool, &cache.input_shape)
    }
}

impl<T: Scalar> Module<T> for PolicyNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> PolicyDistribution<f64> {
        PolicyDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn zero_noise_picks_most_likely() {
        let noise = GumbelNoise::<f64>::from_uniforms(&[(-1.0f64).exp(); 5]);
        assert!(noise.g.iter().all(|g| g.abs() < 1e-15));
        let d = gumbel_max_sample(&dist(&[0.1, 0.2, 0.4, 0.2, 0.1]), &noise).unwrap();
        assert_eq!(d.index, 2);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let d = gumbel_max_sample(&dist(&[0.25, 0.25, 0.25, 0.25]), &GumbelNoise::zeros(4)).unwrap();
        assert_eq!(d.index, 0);
    }

    #[test]
    fn zero_probability_survives_log_clamp() {
        let p = dist(&[0.0, 1.0, 0.0]);
        let d = gumbel_max_sample(&p, &GumbelNoise::zeros(3)).unwrap();
        assert_eq!(d.index, 1);
        let r = gumbel_softmax_relax(&p, &GumbelNoise::zeros(3), 1.0).unwrap();
        assert!(r.simplex.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_relaxation_with_zero_noise_is_uniform() {
        let p = dist(&[0.2; 5]);
        for tau in [0.01, 1.0, 5.0, 100.0] {
            let r = gumbel_softmax_relax(&p, &GumbelNoise::zeros(5), tau).unwrap();
            assert!(r.simplex.iter().all(|v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let p = dist(&[0.5, 0.5]);
        assert!(gumbel_softmax_relax(&p, &GumbelNoise::zeros(2), 0.0).is_err());
        assert!(gumbel_softmax_relax(&p, &GumbelNoise::zeros(2), -1.0).is_err());
    }

    #[test]
    fn straight_through_rejects_length_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let soft = gumbel_softmax_relax(&p, &GumbelNoise::zeros(2), 1.0).unwrap();
        assert!(straight_through(OneHotDecision::new(0, 3).unwrap(), soft).is_err());
    }

    #[test]
    fn thermometer_examples() {
        let expect = |i: usize| to_thermometer(OneHotDecision::new(i, 5).unwrap()).bits().to_vec();
        assert_eq!(expect(0), vec![false; 4]);
        assert_eq!(expect(4), vec![true; 4]);
        assert_eq!(expect(2), vec![true, true, false, false]);
    }

    #[test]
    fn thermometer_rejects_gaps() {
        assert!(ThermometerMask::new(vec![true, false, true, false]).is_err());
        assert!(ThermometerMask::new(vec![true, true, false, false]).is_ok());
    }

    #[test]
    fn thermometer_linear_adjoint() {
        let d = [0.3, -1.0, 2.0, 0.5, 0.7];
        let dw = [1.5, -0.2, 0.9, 0.4];
        let w = thermometer_linear(&d);
        let dd = thermometer_linear_backward(&dw);
        let lhs: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let rhs: f64 = d.iter().zip(&dd).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(temperature_schedule(0), 5.0);
        assert!((temperature_schedule(100) - 5.0 * (-1.5f64).exp()).abs() < 1e-12);
        assert!((temperature_schedule(100) - 1.1157).abs() < 1e-4);
        assert_eq!(temperature_schedule(1_000_000), 0.1);
    }

    #[test]
    fn policy_output_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PolicyNet::<f64>::new(8, 16, 4, &mut rng);
        let xs = Tensor::from_vec(
            &[3, 8, 2, 2],
            (0..96).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let probs = net.forward(&xs, &[0.0, 10.0, 20.0]);
        assert_eq!(probs.shape(), &[3, 5]);
        for b in 0..3 {
            let row = probs.outer(b);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
