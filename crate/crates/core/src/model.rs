//! The end-to-end transmitter/receiver and its training step.

use crate::channel::{
    add_awgn_real, apply_group_mask, apply_group_mask_backward, map_to_complex,
    normalize_power_backward, normalize_power_train, power_normalize, zero_pad_inactive, Channel,
    GroupLayout, GroupedFeatures, SnrDb,
};
use crate::codec::{ChannelDecoder, ChannelEncoder, SourceDecoder, SourceEncoder};
use crate::config::{DecisionMode, ExperimentConfig};
use crate::error::{Error, Result};
use crate::nn::{join, Module, Param};
use crate::policy::{
    gumbel_max_sample, gumbel_softmax_relax, straight_through, straight_through_backward,
    thermometer_linear, thermometer_linear_backward, to_thermometer, GumbelNoise,
    OneHotDecision, PolicyDistribution, PolicyNet, ThermometerMask,
};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where rate decisions come from.
#[derive(Clone, Debug)]
pub enum RateControl<T> {
    Adaptive(PolicyNet<T>),
    /// Constant number of active selective groups.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Adaptive,
    Fixed { active_groups: usize },
}

/// Parameter-name prefixes.
pub const SOURCE_ENCODER: &str = "source_encoder";
pub const CHANNEL_ENCODER: &str = "channel_encoder";
pub const CHANNEL_DECODER: &str = "channel_decoder";
pub const SOURCE_DECODER: &str = "source_decoder";
pub const POLICY: &str = "policy";

#[derive(Clone, Debug)]
pub struct JsccModel<T> {
    pub config: ExperimentConfig,
    pub layout: GroupLayout,
    pub image_hw: (usize, usize),
    pub source_encoder: SourceEncoder<T>,
    pub channel_encoder: ChannelEncoder<T>,
    pub channel_decoder: ChannelDecoder<T>,
    pub source_decoder: SourceDecoder<T>,
    pub rate: RateControl<T>,
}

/// Result of sending a batch through the full system in inference mode.
#[derive(Clone, Debug)]
pub struct Transmission<T> {
    pub reconstruction: Tensor<T>,
    pub masks: Vec<ThermometerMask>,
    pub g_active: Vec<usize>,
    /// Policy probabilities `[B, G_s+1]` (adaptive models only).
    pub probs: Option<Tensor<T>>,
}

/// Scalars from one optimization step, batch-averaged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    /// Mean number of active selective groups.
    pub active_selective: f64,
    /// Mean channel uses per pixel.
    pub cpp: f64,
}

/// Training-mode inputs for one step.
pub struct StepInputs<'a, T> {
    pub images: &'a Tensor<T>,
    pub snr_db: &'a [f64],
    pub tau: f64,
    pub alpha: f64,
    /// Skip gradients for the source encoder and the policy.
    pub freeze_source_and_policy: bool,
}

impl<T: Scalar> JsccModel<T> {
    pub fn new(config: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fh, fw) = config.feature_hw();
        let proj = config.projection_channels();
        let cs = config.source_channels;
        let source_encoder = SourceEncoder::new(config.source_hidden, cs, &mut rng);
        let channel_encoder = ChannelEncoder::new(cs, proj, layout, &mut rng);
        let channel_decoder = ChannelDecoder::new([proj, fh, fw], cs, &mut rng);
        let source_decoder = SourceDecoder::new(cs, config.source_hidden, &mut rng);
        let rate = match kind {
            ModelKind::Adaptive => {
                RateControl::Adaptive(PolicyNet::new(cs, config.policy_hidden, layout.selective, &mut rng))
            }
            ModelKind::Fixed { active_groups } => {
                if active_groups > layout.selective {
                    return Err(Error::Argument(format!(
                        "{active_groups} active groups but only {} selective groups",
                        layout.selective
                    )));
                }
                RateControl::Fixed(active_groups)
            }
        };
        Ok(Self {
            config: config.clone(),
            layout,
            image_hw: (config.image_height, config.image_width),
            source_encoder,
            channel_encoder,
            channel_decoder,
            source_decoder,
            rate,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.rate {
            RateControl::Adaptive(_) => ModelKind::Adaptive,
            RateControl::Fixed(j) => ModelKind::Fixed { active_groups: j },
        }
    }

    fn check_images(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.image_hw;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!("expected [B, 3, {h}, {w}] images, got {s:?}")));
        }
        Ok(())
    }

    fn snr_column(snr_db: &[f64]) -> Vec<T> {
        snr_db.iter().map(|&v| s::<T>(v)).collect()
    }

    /// Rate decisions for a batch of source features.
    pub fn decide(
        &self,
        xs: &Tensor<T>,
        snr_db: &[f64],
        mode: DecisionMode,
        rng: &mut impl Rng,
    ) -> (Vec<usize>, Option<Tensor<T>>) {
        let b = xs.dim(0);
        match &self.rate {
            RateControl::Fixed(j) => (vec![*j; b], None),
            RateControl::Adaptive(policy) => {
                let probs = policy.forward(xs, &Self::snr_column(snr_db));
                let k = probs.dim(1);
                let choices = (0..b)
                    .map(|i| {
                        let p = PolicyDistribution {
                            probs: probs.outer(i).to_vec(),
                        };
                        match mode {
                            DecisionMode::Argmax => p.argmax(),
                            DecisionMode::Sample => {
                                let noise = GumbelNoise::sample(k, rng);
                                gumbel_max_sample(&p, &noise).expect("matching lengths").index
                            }
                        }
                    })
                    .collect();
                (choices, Some(probs))
            }
        }
    }

    /// Inference over an AWGN channel at `snr`.
    pub fn transmit(&self, x: &Tensor<T>, snr: SnrDb, mode: DecisionMode, seed: u64) -> Result<Transmission<T>> {
        self.transmit_over(x, snr, Channel::Awgn(snr), mode, seed)
    }

    /// Inference through the complex-symbol path with an explicit channel;
    /// `snr` is what the codec and the policy are conditioned on.
    pub fn transmit_over(
        &self,
        x: &Tensor<T>,
        snr: SnrDb,
        channel: Channel,
        mode: DecisionMode,
        seed: u64,
    ) -> Result<Transmission<T>> {
        self.check_images(x)?;
        let b = x.dim(0);
        let snr_col = vec![snr.db(); b];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = self.source_encoder.forward(x);
        let (choices, probs) = self.decide(&xs, &snr_col, mode, &mut rng);
        let k = self.layout.selective + 1;
        let masks: Vec<ThermometerMask> = choices
            .iter()
            .map(|&c| to_thermometer(OneHotDecision::new(c, k).expect("choice in range")))
            .collect();
        let snr_t = Self::snr_column(&snr_col);
        let z = self.channel_encoder.forward(&xs, &snr_t);
        let frame = map_to_complex(&GroupedFeatures::new(z, self.layout)?);
        let frame = power_normalize(&frame, &masks)?;
        let received = channel.transmit(&frame, rng.random());
        let padded = zero_pad_inactive(&received)?;
        let fs = self.channel_decoder.forward(&padded.data, &snr_t);
        let reconstruction = self.source_decoder.forward(&fs);
        Ok(Transmission {
            reconstruction,
            g_active: frame.g_active,
            masks,
            probs,
        })
    }

    /// One forward/backward pass accumulating gradients into the parameters.
    ///
    /// Gradients are *not* zeroed here.
    pub fn accumulate_gradients(&mut self, inp: &StepInputs<'_, T>, rng: &mut impl Rng) -> Result<StepStats> {
        let x = inp.images;
        self.check_images(x)?;
        let b = x.dim(0);
        if inp.snr_db.len() != b {
            return Err(Error::Argument("one SNR per image is required".into()));
        }
        let layout = self.layout;
        let gs = layout.selective;
        let snr = Self::snr_column(inp.snr_db);

        let (xs, enc_cache) = self.source_encoder.forward_train(x);

        // Rate decision: hard forward value, relaxed backward path.
        let mut mask = Tensor::zeros(&[b, gs]);
        let mut decisions = Vec::with_capacity(b);
        let policy_state = match &self.rate {
            RateControl::Fixed(j) => {
                let m = ThermometerMask::from_count(*j, gs);
                for i in 0..b {
                    for (v, &bit) in mask.outer_mut(i).iter_mut().zip(m.bits()) {
                        *v = if bit { T::one() } else { T::zero() };
                    }
                }
                None
            }
            RateControl::Adaptive(policy) => {
                let cache = policy.forward_train(&xs, &snr);
                let tau = s::<T>(inp.tau);
                let mut per_image = Vec::with_capacity(b);
                for i in 0..b {
                    let p = PolicyDistribution {
                        probs: cache.probs.outer(i).to_vec(),
                    };
                    let noise = GumbelNoise::sample(gs + 1, rng);
                    let hard = gumbel_max_sample(&p, &noise)?;
                    let soft = gumbel_softmax_relax(&p, &noise, tau)?;
                    let st = straight_through(hard, soft)?;
                    mask.outer_mut(i).copy_from_slice(&thermometer_linear(&st.value));
                    per_image.push((p, st));
                }
                Some((cache, per_image))
            }
        };
        for i in 0..b {
            let active = mask.outer(i).iter().filter(|&&v| v > s(0.5)).count();
            decisions.push(active);
        }
        let g_active_int: Vec<usize> = decisions.iter().map(|d| layout.nonselective + d).collect();
        let g_active: Vec<T> = (0..b)
            .map(|i| s::<T>(layout.nonselective as f64) + mask.outer(i).iter().copied().sum::<T>())
            .collect();

        let (z, ce_cache) = self.channel_encoder.forward_train(&xs, &snr);
        let zm = apply_group_mask(&z, &mask, layout);
        let (tx, norm_cache) = normalize_power_train(&zm, &g_active, layout)?;
        let rx = add_awgn_real(&tx, &g_active_int, inp.snr_db, layout, rng);
        let (fs, cd_cache) = self.channel_decoder.forward_train(&rx, &snr);
        let (y, sd_cache) = self.source_decoder.forward_train(&fs);

        let parts = crate::training::loss(x, &y, &mask, inp.alpha)?;
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", parts.total)));
        }

        // Backward.
        let n = x.len() / b;
        let scale = s::<T>(2.0 / (b * n) as f64);
        let dy = y.zip_map(x, |a, t| (a - t) * scale);
        let dfs = self.source_decoder.backward(&sd_cache, &dy);
        let drx = self.channel_decoder.backward(&cd_cache, &dfs);
        let (dzm, dg) = normalize_power_backward(&norm_cache, &drx);
        let (dz, mut dmask) = apply_group_mask_backward(&z, &mask, &dzm, layout);
        let eff = s::<T>(inp.alpha / b as f64);
        for i in 0..b {
            let dgi = dg[i];
            dmask.outer_mut(i).iter_mut().for_each(|v| *v = *v + eff + dgi);
        }
        let mut dxs = self.channel_encoder.backward(&ce_cache, &dz);
        if !inp.freeze_source_and_policy {
            if let (RateControl::Adaptive(policy), Some((cache, per_image))) = (&mut self.rate, policy_state) {
                let mut dlogits = Tensor::zeros(&[b, gs + 1]);
                for (i, (p, st)) in per_image.iter().enumerate() {
                    let dvalue = thermometer_linear_backward(dmask.outer(i));
                    dlogits
                        .outer_mut(i)
                        .copy_from_slice(&straight_through_backward(p, &st.soft, &dvalue));
                }
                dxs.add_assign(&policy.backward(&cache, &dlogits));
            }
            self.source_encoder.backward(&enc_cache, &dxs);
        }

        let active_selective = decisions.iter().sum::<usize>() as f64 / b as f64;
        let (h, w) = self.image_hw;
        let cpp = g_active_int
            .iter()
            .map(|&g| (g * layout.length) as f64 / (2 * h * w) as f64)
            .sum::<f64>()
            / b as f64;
        Ok(StepStats {
            loss: parts.total,
            mse: parts.reconstruction,
            active_selective,
            cpp,
        })
    }

    /// Whether a parameter belongs to the part frozen in the fine-tuning stage.
    pub fn is_source_or_policy(name: &str) -> bool {
        name.starts_with(SOURCE_ENCODER) || name.starts_with(POLICY)
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> JsccModel<U> {
        let mut out = JsccModel::<U>::new(&self.config, self.kind(), 0).expect("validated config");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| {
            p.value = it.next().expect("same parameter list");
        });
        out
    }
}

impl<T: Scalar> Module<T> for JsccModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.source_encoder.visit(&join(prefix, SOURCE_ENCODER), f);
        self.channel_encoder.visit(&join(prefix, CHANNEL_ENCODER), f);
        self.channel_decoder.visit(&join(prefix, CHANNEL_DECODER), f);
        self.source_decoder.visit(&join(prefix, SOURCE_DECODER), f);
        if let RateControl::Adaptive(p) = &self.rate {
            p.visit(&join(prefix, POLICY), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.source_encoder.visit_mut(&join(prefix, SOURCE_ENCODER), f);
        self.channel_encoder.visit_mut(&join(prefix, CHANNEL_ENCODER), f);
        self.channel_decoder.visit_mut(&join(prefix, CHANNEL_DECODER), f);
        self.source_decoder.visit_mut(&join(prefix, SOURCE_DECODER), f);
        if let RateControl::Adaptive(p) = &mut self.rate {
            p.visit_mut(&join(prefix, POLICY), f);
        }
    }
}
