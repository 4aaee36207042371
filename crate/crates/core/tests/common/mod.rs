//! Central finite-difference gradient checks shared by the gradient tests and
//! the acceptance suite.

#![allow(dead_code)]

use adjscc_core::channel::{apply_group_mask, apply_group_mask_backward, normalize_power_backward, normalize_power_train, GroupLayout};
use adjscc_core::codec::{ChannelDecoder, ChannelEncoder, ResBlock, SnrAdaptive, SourceDecoder, SourceEncoder};
use adjscc_core::config::ExperimentConfig;
use adjscc_core::model::{JsccModel, ModelKind, StepInputs};
use adjscc_core::nn::{Module, Param};
use adjscc_core::policy::{gumbel_softmax_relax, straight_through_backward, GumbelNoise, PolicyDistribution, PolicyNet};
use adjscc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Step for the whole-model check, whose loss sums many more terms.
pub const STEP_END_TO_END: f64 = 1e-5;
/// Gradients below this magnitude are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;
/// Parameters probed per operation.
pub const PROBES: usize = 100;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub op: &'static str,
    pub probes: Vec<Probe>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| rel_err(p.analytic, p.numeric))
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| rel_err(a.analytic, a.numeric).total_cmp(&rel_err(b.analytic, b.numeric)))
    }

    /// Probes of trainable parameters, or of the operands of a
    /// parameter-free operation.
    pub fn parameter_probes(&self) -> usize {
        self.probes.iter().filter(|p| !p.label.starts_with("input")).count()
    }

    pub fn passes(&self) -> bool {
        self.max_rel_err() < TOLERANCE && self.parameter_probes() >= PROBES
    }

    pub fn summary(&self) -> String {
        let w = self.worst().map_or(String::new(), |p| {
            format!(" worst {} (analytic {:.6e}, numeric {:.6e})", p.label, p.analytic, p.numeric)
        });
        format!(
            "{}: {} probes, max rel err {:.2e}{w}",
            self.op,
            self.probes.len(),
            self.max_rel_err()
        )
    }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Flat `(name, index)` list of every scalar parameter.
fn parameter_slots<M: Module<f64>>(m: &M) -> Vec<(String, usize)> {
    let mut slots = Vec::new();
    m.visit("", &mut |name, p: &Param<f64>| {
        slots.extend((0..p.value.len()).map(|i| (name.to_string(), i)));
    });
    slots
}

fn nudge<M: Module<f64>>(m: &mut M, name: &str, idx: usize, delta: f64) {
    m.visit_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[idx] += delta;
        }
    });
}

fn grad_of<M: Module<f64>>(m: &M, name: &str, idx: usize) -> f64 {
    let mut g = 0.0;
    m.visit("", &mut |n, p| {
        if n == name {
            g = p.grad.data()[idx];
        }
    });
    g
}

/// Probes `count` random parameters of `m` (all of them if fewer).
///
/// `grads` must leave the analytic gradient of `loss` in the parameters.
pub fn check_parameters<M: Module<f64> + Clone>(
    m: &M,
    count: usize,
    rng: &mut impl Rng,
    loss: &dyn Fn(&M) -> f64,
    grads: &dyn Fn(&mut M),
) -> Vec<Probe> {
    check_parameters_with_step(m, count, STEP, rng, loss, grads)
}

pub fn check_parameters_with_step<M: Module<f64> + Clone>(
    m: &M,
    count: usize,
    h: f64,
    rng: &mut impl Rng,
    loss: &dyn Fn(&M) -> f64,
    grads: &dyn Fn(&mut M),
) -> Vec<Probe> {
    let mut analytic = m.clone();
    analytic.zero_grad();
    grads(&mut analytic);
    let mut slots = parameter_slots(m);
    if slots.len() > count {
        rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), rng);
        slots.truncate(count);
    }
    let mut probe = m.clone();
    slots
        .into_iter()
        .map(|(name, idx)| {
            nudge(&mut probe, &name, idx, h);
            let up = loss(&probe);
            nudge(&mut probe, &name, idx, -2.0 * h);
            let down = loss(&probe);
            nudge(&mut probe, &name, idx, h);
            Probe {
                label: format!("{name}[{idx}]"),
                analytic: grad_of(&analytic, &name, idx),
                numeric: (up - down) / (2.0 * h),
            }
        })
        .collect()
}

/// Probes `count` random entries of an input tensor.
pub fn check_input(
    x: &Tensor<f64>,
    dx: &Tensor<f64>,
    count: usize,
    rng: &mut impl Rng,
    loss: &dyn Fn(&Tensor<f64>) -> f64,
) -> Vec<Probe> {
    let mut probe = x.clone();
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..x.len());
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let up = loss(&probe);
            probe.data_mut()[i] = orig - STEP;
            let down = loss(&probe);
            probe.data_mut()[i] = orig;
            Probe {
                label: format!("input[{i}]"),
                analytic: dx.data()[i],
                numeric: (up - down) / (2.0 * STEP),
            }
        })
        .collect()
}

const INPUT_PROBES: usize = 30;

pub fn source_encoder(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = SourceEncoder::<f64>::new(4, 8, &mut rng);
    let x = random_tensor(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let r = random_tensor(m.forward(&x).shape(), -1.0, 1.0, &mut rng);
    let loss = |m: &SourceEncoder<f64>| dot(&r, &m.forward(&x));
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let (_, c) = m.forward_train(&x);
        m.backward(&c, &r);
    });
    let mut g = m.clone();
    let (_, c) = g.forward_train(&x);
    let dx = g.backward(&c, &r);
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x))));
    Report { op: "source_encode", probes }
}

fn snr_column(b: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..b).map(|_| rng.random_range(0.0..20.0)).collect()
}

pub fn snr_adaptive(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = SnrAdaptive::<f64>::new(8, &mut rng);
    let x = random_tensor(&[2, 8, 3, 3], -1.0, 1.0, &mut rng);
    let snr = snr_column(2, &mut rng);
    let r = random_tensor(x.shape(), -1.0, 1.0, &mut rng);
    let loss = |m: &SnrAdaptive<f64>| dot(&r, &m.forward(&x, &snr));
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let (_, c) = m.forward_train(&x, &snr);
        m.backward(&c, &r);
    });
    let mut g = m.clone();
    let (_, c) = g.forward_train(&x, &snr);
    let dx = g.backward(&c, &r);
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x, &snr))));
    Report { op: "snr_adaptive", probes }
}

pub fn res_block(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ResBlock::<f64>::new(4, &mut rng);
    let x = random_tensor(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
    let r = random_tensor(x.shape(), -1.0, 1.0, &mut rng);
    let loss = |m: &ResBlock<f64>| dot(&r, &m.forward(&x));
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let (_, c) = m.forward_train(&x);
        m.backward(&c, &r);
    });
    let mut g = m.clone();
    let (_, c) = g.forward_train(&x);
    let dx = g.backward(&c, &r);
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x))));
    Report { op: "res_block", probes }
}

fn small_layout() -> GroupLayout {
    GroupLayout::new(2, 2, 4).unwrap()
}

pub fn channel_encoder(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 4 groups of 4 reals fold into 4 projection channels on a 2x2 map.
    let m = ChannelEncoder::<f64>::new(8, 4, small_layout(), &mut rng);
    let x = random_tensor(&[2, 8, 2, 2], -1.0, 1.0, &mut rng);
    let snr = snr_column(2, &mut rng);
    let r = random_tensor(m.forward(&x, &snr).shape(), -1.0, 1.0, &mut rng);
    let loss = |m: &ChannelEncoder<f64>| dot(&r, &m.forward(&x, &snr));
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let (_, c) = m.forward_train(&x, &snr);
        m.backward(&c, &r);
    });
    let mut g = m.clone();
    let (_, c) = g.forward_train(&x, &snr);
    let dx = g.backward(&c, &r);
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x, &snr))));
    Report { op: "channel_encode", probes }
}

pub fn channel_decoder(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ChannelDecoder::<f64>::new([4, 2, 2], 8, &mut rng);
    let x = random_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng);
    let snr = snr_column(2, &mut rng);
    let r = random_tensor(m.forward(&x, &snr).shape(), -1.0, 1.0, &mut rng);
    let loss = |m: &ChannelDecoder<f64>| dot(&r, &m.forward(&x, &snr));
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let (_, c) = m.forward_train(&x, &snr);
        m.backward(&c, &r);
    });
    let mut g = m.clone();
    let (_, c) = g.forward_train(&x, &snr);
    let dx = g.backward(&c, &r);
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x, &snr))));
    Report { op: "channel_decode", probes }
}

pub fn source_decoder(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = SourceDecoder::<f64>::new(8, 4, &mut rng);
    let x = random_tensor(&[2, 8, 2, 2], -1.0, 1.0, &mut rng);
    let r = random_tensor(m.forward(&x).shape(), -1.0, 1.0, &mut rng);
    let loss = |m: &SourceDecoder<f64>| dot(&r, &m.forward(&x));
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let (_, c) = m.forward_train(&x);
        m.backward(&c, &r);
    });
    let mut g = m.clone();
    let (_, c) = g.forward_train(&x);
    let dx = g.backward(&c, &r);
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x))));
    Report { op: "source_decode", probes }
}

/// Linear readout of the policy probabilities.
pub fn policy_forward(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = PolicyNet::<f64>::new(8, 16, 4, &mut rng);
    let x = random_tensor(&[3, 8, 2, 2], -1.0, 1.0, &mut rng);
    let snr = snr_column(3, &mut rng);
    // Readout on the probabilities; its logit gradient is `p ⊙ (r - <p, r>)`.
    let r = random_tensor(&[3, 5], -1.0, 1.0, &mut rng);
    let loss = |m: &PolicyNet<f64>| dot(&r, &m.forward(&x, &snr));
    let dlogits = |p: &Tensor<f64>| {
        let mut d = Tensor::zeros(p.shape());
        for b in 0..p.dim(0) {
            let (pb, rb) = (p.outer(b), r.outer(b));
            let inner: f64 = pb.iter().zip(rb).map(|(a, c)| a * c).sum();
            for (k, v) in d.outer_mut(b).iter_mut().enumerate() {
                *v = pb[k] * (rb[k] - inner);
            }
        }
        d
    };
    let mut probes = check_parameters(&m, PROBES, &mut rng, &loss, &|m| {
        let c = m.forward_train(&x, &snr);
        let d = dlogits(&c.probs);
        m.backward(&c, &d);
    });
    let mut g = m.clone();
    let c = g.forward_train(&x, &snr);
    let dx = g.backward(&c, &dlogits(&c.probs));
    probes.extend(check_input(&x, &dx, INPUT_PROBES, &mut rng, &|x| dot(&r, &m.forward(x, &snr))));
    Report { op: "policy_forward", probes }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Straight-through backward against finite differences of the relaxed path
/// `logits -> softmax -> Gumbel-Softmax -> <c, .>` over random cases.
pub fn straight_through(seed: u64, cases: usize) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for case in 0..cases {
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let us: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..0.99)).collect();
        let noise = GumbelNoise::<f64>::from_uniforms(&us);
        let tau = rng.random_range(0.2..5.0);
        let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let readout = |l: &[f64]| {
            let p = PolicyDistribution::new(softmax(l)).unwrap();
            let soft = gumbel_softmax_relax(&p, &noise, tau).unwrap();
            soft.simplex.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let p = PolicyDistribution::new(softmax(&logits)).unwrap();
        let soft = gumbel_softmax_relax(&p, &noise, tau).unwrap();
        let analytic = straight_through_backward(&p, &soft, &c);
        for k in 0..5 {
            let mut l = logits.clone();
            l[k] += STEP;
            let up = readout(&l);
            l[k] -= 2.0 * STEP;
            let down = readout(&l);
            probes.push(Probe {
                label: format!("case{case}.logit[{k}]"),
                analytic: analytic[k],
                numeric: (up - down) / (2.0 * STEP),
            });
        }
    }
    Report { op: "straight_through", probes }
}

/// Group masking followed by per-image power normalization.
pub fn mask_and_normalize(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = GroupLayout::new(2, 2, 8).unwrap();
    let z = random_tensor(&[4, 4, 8], -1.0, 1.0, &mut rng);
    let mask = random_tensor(&[4, 2], 0.2, 1.0, &mut rng);
    let r = random_tensor(z.shape(), -1.0, 1.0, &mut rng);
    let g_active = |mask: &Tensor<f64>| -> Vec<f64> {
        (0..mask.dim(0)).map(|b| 2.0 + mask.outer(b).iter().sum::<f64>()).collect()
    };
    let forward = |z: &Tensor<f64>, mask: &Tensor<f64>| {
        let zm = apply_group_mask(z, mask, layout);
        dot(&r, &normalize_power_train(&zm, &g_active(mask), layout).unwrap().0)
    };
    let zm = apply_group_mask(&z, &mask, layout);
    let (_, cache) = normalize_power_train(&zm, &g_active(&mask), layout).unwrap();
    let (dzm, dg) = normalize_power_backward(&cache, &r);
    let (dz, mut dmask) = apply_group_mask_backward(&z, &mask, &dzm, layout);
    for (b, d) in dg.iter().enumerate() {
        dmask.outer_mut(b).iter_mut().for_each(|v| *v += d);
    }
    let relabel = |ps: Vec<Probe>, to: &str| -> Vec<Probe> {
        ps.into_iter()
            .map(|p| Probe {
                label: p.label.replace("input", to),
                ..p
            })
            .collect()
    };
    let mut probes = relabel(check_input(&z, &dz, PROBES, &mut rng, &|z| forward(z, &mask)), "z");
    probes.extend(relabel(check_input(&mask, &dmask, 8, &mut rng, &|m| forward(&z, m)), "mask"));
    Report { op: "mask_and_normalize", probes }
}

/// Whole fixed-rate training loss (noise held fixed by reseeding).
pub fn end_to_end_fixed_rate(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = ExperimentConfig::smoke();
    config.source_channels = 4;
    config.source_hidden = 3;
    let model = JsccModel::<f64>::new(&config, ModelKind::Fixed { active_groups: 2 }, seed).unwrap();
    let x = random_tensor(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let snr = [3.0, 12.0];
    let run = |m: &mut JsccModel<f64>| {
        let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
        m.accumulate_gradients(
            &StepInputs {
                images: &x,
                snr_db: &snr,
                tau: 1.0,
                alpha: 0.0,
                freeze_source_and_policy: false,
            },
            &mut noise,
        )
        .unwrap()
        .loss
    };
    let probes = check_parameters_with_step(
        &model,
        PROBES,
        STEP_END_TO_END,
        &mut rng,
        &|m| run(&mut m.clone()),
        &|m| {
            run(m);
        },
    );
    Report { op: "end_to_end_fixed_rate", probes }
}

/// Every check, in a fixed order.
pub fn all_reports(seed: u64) -> Vec<Report> {
    vec![
        source_encoder(seed),
        res_block(seed + 1),
        snr_adaptive(seed + 2),
        channel_encoder(seed + 3),
        channel_decoder(seed + 4),
        source_decoder(seed + 5),
        policy_forward(seed + 6),
        straight_through(seed + 7, 100),
        mask_and_normalize(seed + 8),
        end_to_end_fixed_rate(seed + 9),
    ]
}
