//! Grouped-feature framing, complex symbol mapping, per-image power
//! normalization, AWGN transmission and channel-usage accounting.
//!
//! Group order within a frame: the `G_n` non-selective groups come first,
//! followed by the `G_s` selective groups in thermometer order. Active groups
//! are therefore always the first `G̃ = G_n + Σ w` groups of a frame.

use crate::error::{Error, Result};
use crate::policy::ThermometerMask;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Symbol SNR in decibels.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SnrDb(f64);

impl SnrDb {
    pub fn new(db: f64) -> Result<Self> {
        if db.is_finite() {
            Ok(Self(db))
        } else {
            Err(Error::Argument(format!("SNR must be finite, got {db}")))
        }
    }

    pub fn db(self) -> f64 {
        self.0
    }
}

/// Noise variance per complex symbol for unit signal power.
pub fn snr_to_noise_variance(snr: SnrDb) -> f64 {
    10f64.powf(-snr.0 / 10.0)
}

/// Group counts and group length of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub selective: usize,
    pub nonselective: usize,
    pub length: usize,
}

impl GroupLayout {
    pub fn new(selective: usize, nonselective: usize, length: usize) -> Result<Self> {
        if length == 0 || !length.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "group length must be even and positive, got {length}"
            )));
        }
        if selective == 0 {
            return Err(Error::Config("at least one selective group is required".into()));
        }
        Ok(Self {
            selective,
            nonselective,
            length,
        })
    }

    pub fn groups(&self) -> usize {
        self.selective + self.nonselective
    }

    pub fn symbols_per_group(&self) -> usize {
        self.length / 2
    }

    pub fn active_groups(&self, mask: &ThermometerMask) -> usize {
        self.nonselective + mask.active()
    }
}

/// Real channel-encoder output `[B, G_n+G_s, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedFeatures<T> {
    pub data: Tensor<T>,
    pub layout: GroupLayout,
}

impl<T: Scalar> GroupedFeatures<T> {
    pub fn new(data: Tensor<T>, layout: GroupLayout) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[1] != layout.groups() || shape[2] != layout.length {
            return Err(Error::Shape(format!(
                "expected [B, {}, {}], got {shape:?}",
                layout.groups(),
                layout.length
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn batch(&self) -> usize {
        self.data.dim(0)
    }
}

/// Complex symbols `[B, G, L/2]` with the number of active groups per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame<T> {
    pub symbols: Vec<Complex<T>>,
    pub layout: GroupLayout,
    pub batch: usize,
    pub g_active: Vec<usize>,
}

impl<T: Scalar> SymbolFrame<T> {
    fn image_len(&self) -> usize {
        self.layout.groups() * self.layout.symbols_per_group()
    }

    pub fn image(&self, b: usize) -> &[Complex<T>] {
        let n = self.image_len();
        &self.symbols[b * n..(b + 1) * n]
    }

    fn image_mut(&mut self, b: usize) -> &mut [Complex<T>] {
        let n = self.image_len();
        &mut self.symbols[b * n..(b + 1) * n]
    }

    /// Number of transmitted symbols of image `b`.
    pub fn active_symbols(&self, b: usize) -> usize {
        self.g_active[b] * self.layout.symbols_per_group()
    }

    /// Per-group activity for image `b`.
    pub fn active_mask(&self, b: usize) -> Vec<bool> {
        (0..self.layout.groups()).map(|g| g < self.g_active[b]).collect()
    }

    /// Mean `|x|²` over the active symbols of image `b`.
    pub fn active_power(&self, b: usize) -> f64 {
        let n = self.active_symbols(b);
        if n == 0 {
            return 0.0;
        }
        self.image(b)[..n]
            .iter()
            .map(|c| c.norm_sqr().to_f64_lossy())
            .sum::<f64>()
            / n as f64
    }
}

/// `symbol_j = f[j] + i f[j + L/2]` per group; every group is marked active.
pub fn map_to_complex<T: Scalar>(features: &GroupedFeatures<T>) -> SymbolFrame<T> {
    let half = features.layout.symbols_per_group();
    let symbols = features
        .data
        .data()
        .chunks_exact(features.layout.length)
        .flat_map(|g| (0..half).map(move |j| Complex::new(g[j], g[j + half])))
        .collect();
    SymbolFrame {
        symbols,
        layout: features.layout,
        batch: features.batch(),
        g_active: vec![features.layout.groups(); features.batch()],
    }
}

/// Inverse of [`map_to_complex`].
pub fn unmap_from_complex<T: Scalar>(frame: &SymbolFrame<T>) -> GroupedFeatures<T> {
    let half = frame.layout.symbols_per_group();
    let mut data = Vec::with_capacity(frame.symbols.len() * 2);
    for g in frame.symbols.chunks_exact(half) {
        data.extend(g.iter().map(|c| c.re));
        data.extend(g.iter().map(|c| c.im));
    }
    GroupedFeatures {
        data: Tensor::from_vec(
            &[frame.batch, frame.layout.groups(), frame.layout.length],
            data,
        ),
        layout: frame.layout,
    }
}

/// Scales each image so its active symbols have unit mean power and zeroes
/// everything beyond the active prefix.
pub fn power_normalize<T: Scalar>(
    frame: &SymbolFrame<T>,
    masks: &[ThermometerMask],
) -> Result<SymbolFrame<T>> {
    if masks.len() != frame.batch {
        return Err(Error::Argument(format!(
            "{} masks for a batch of {}",
            masks.len(),
            frame.batch
        )));
    }
    let mut out = frame.clone();
    for (b, mask) in masks.iter().enumerate() {
        if mask.len() != frame.layout.selective {
            return Err(Error::Argument(format!(
                "mask length {} but {} selective groups",
                mask.len(),
                frame.layout.selective
            )));
        }
        out.g_active[b] = frame.layout.active_groups(mask);
        let n = out.active_symbols(b);
        let img = out.image_mut(b);
        let energy: T = img[..n].iter().map(|c| c.norm_sqr()).sum();
        if n == 0 || !(energy > T::zero()) {
            return Err(Error::Degenerate(format!(
                "image {b} has zero power over its active symbols"
            )));
        }
        let scale = (s::<T>(n as f64) / energy).sqrt();
        img[..n].iter_mut().for_each(|c| *c = *c * scale);
        img[n..].iter_mut().for_each(|c| *c = Complex::new(T::zero(), T::zero()));
    }
    Ok(out)
}

/// Adds circular complex Gaussian noise of variance `σ²` to active symbols.
///
/// Draw order is image-major then symbol order, so a seed fixes the output.
pub fn awgn_transmit<T: Scalar>(frame: &SymbolFrame<T>, snr: SnrDb, seed: u64) -> SymbolFrame<T> {
    let std = s::<T>((snr_to_noise_variance(snr) / 2.0).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    for b in 0..out.batch {
        let n = out.active_symbols(b);
        for c in &mut out.image_mut(b)[..n] {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *c = *c + Complex::new(s::<T>(re) * std, s::<T>(im) * std);
        }
    }
    out
}

/// What the receiver sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Channel {
    Awgn(SnrDb),
    /// Testing aid: output equals input.
    Noiseless,
}

impl Channel {
    pub fn transmit<T: Scalar>(&self, frame: &SymbolFrame<T>, seed: u64) -> SymbolFrame<T> {
        match self {
            Channel::Awgn(snr) => awgn_transmit(frame, *snr, seed),
            Channel::Noiseless => frame.clone(),
        }
    }
}

/// `G̃ L / (2 H W)` channel uses per pixel.
pub fn compute_cpp(g_active: usize, length: usize, height: usize, width: usize) -> Result<f64> {
    if g_active == 0 || length == 0 || height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "cpp needs positive arguments, got ({g_active}, {length}, {height}, {width})"
        )));
    }
    Ok((g_active * length) as f64 / (2 * height * width) as f64)
}

/// Restores the full `[B, G, L]` real tensor; groups past `g_active` are zero.
pub fn zero_pad_inactive<T: Scalar>(received: &SymbolFrame<T>) -> Result<GroupedFeatures<T>> {
    let layout = received.layout;
    if received.g_active.len() != received.batch
        || received.symbols.len() != received.batch * received.image_len()
    {
        return Err(Error::Framing("frame metadata disagrees with its symbol count".into()));
    }
    if let Some(&g) = received
        .g_active
        .iter()
        .find(|&&g| g < layout.nonselective || g > layout.groups())
    {
        return Err(Error::Framing(format!(
            "{g} active groups outside [{}, {}]",
            layout.nonselective,
            layout.groups()
        )));
    }
    let mut frame = received.clone();
    for b in 0..frame.batch {
        let n = frame.active_symbols(b);
        frame.image_mut(b)[n..]
            .iter_mut()
            .for_each(|c| *c = Complex::new(T::zero(), T::zero()));
    }
    Ok(unmap_from_complex(&frame))
}

/// Writes image `b` of a frame as a debug dump: `G_s, G_n, L, g_active` as
/// little-endian `u32`, then `f32` real/imag pairs in group-major order.
pub fn write_frame_dump<T: Scalar>(
    frame: &SymbolFrame<T>,
    b: usize,
    mut w: impl Write,
) -> Result<()> {
    let header = [
        frame.layout.selective,
        frame.layout.nonselective,
        frame.layout.length,
        frame.g_active[b],
    ];
    for v in header {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for c in frame.image(b) {
        w.write_all(&(c.re.to_f64_lossy() as f32).to_le_bytes())?;
        w.write_all(&(c.im.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one image written by [`write_frame_dump`].
pub fn read_frame_dump(mut r: impl Read) -> Result<SymbolFrame<f32>> {
    let mut word = [0u8; 4];
    let mut next = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let selective = next(&mut r)? as usize;
    let nonselective = next(&mut r)? as usize;
    let length = next(&mut r)? as usize;
    let g_active = next(&mut r)? as usize;
    let layout = GroupLayout::new(selective, nonselective, length)?;
    if g_active > layout.groups() {
        return Err(Error::Framing(format!("{g_active} active of {} groups", layout.groups())));
    }
    let n = layout.groups() * layout.symbols_per_group();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let symbols = bytes
        .chunks_exact(8)
        .map(|p| {
            Complex::new(
                f32::from_le_bytes(p[..4].try_into().unwrap()),
                f32::from_le_bytes(p[4..].try_into().unwrap()),
            )
        })
        .collect();
    Ok(SymbolFrame {
        symbols,
        layout,
        batch: 1,
        g_active: vec![g_active],
    })
}

// ---------------------------------------------------------------------------
// Batched real-layout versions used during training. A complex symbol's power
// is the sum of squares of its two real features, so normalizing over the
// real layout is identical to normalizing the complex frame.

/// Multiplies each selective group by its mask value; non-selective groups
/// pass through. `mask` is `[B, G_s]`.
pub fn apply_group_mask<T: Scalar>(z: &Tensor<T>, mask: &Tensor<T>, layout: GroupLayout) -> Tensor<T> {
    let mut out = z.clone();
    let l = layout.length;
    for b in 0..z.dim(0) {
        let m = mask.outer(b);
        let img = out.outer_mut(b);
        for k in 0..layout.selective {
            let g = layout.nonselective + k;
            img[g * l..(g + 1) * l].iter_mut().for_each(|v| *v = *v * m[k]);
        }
    }
    out
}

/// Returns `(dz, dmask)`.
pub fn apply_group_mask_backward<T: Scalar>(
    z: &Tensor<T>,
    mask: &Tensor<T>,
    dy: &Tensor<T>,
    layout: GroupLayout,
) -> (Tensor<T>, Tensor<T>) {
    let l = layout.length;
    let mut dz = dy.clone();
    let mut dmask = Tensor::zeros(mask.shape());
    for b in 0..z.dim(0) {
        let m = mask.outer(b).to_vec();
        let zi = z.outer(b);
        let dyi = dy.outer(b);
        let dzi = dz.outer_mut(b);
        let mut dm = vec![T::zero(); layout.selective];
        for k in 0..layout.selective {
            let g = layout.nonselective + k;
            let r = g * l..(g + 1) * l;
            dm[k] = zi[r.clone()].iter().zip(&dyi[r.clone()]).map(|(&a, &b)| a * b).sum();
            dzi[r].iter_mut().for_each(|v| *v = *v * m[k]);
        }
        dmask.outer_mut(b).copy_from_slice(&dm);
    }
    (dz, dmask)
}

pub struct NormalizeCache<T> {
    input: Tensor<T>,
    scale: Vec<T>,
    energy: Vec<T>,
    active_symbols: Vec<T>,
    length: usize,
}

/// Per-image `x * sqrt(n / Σx²)` with `n = g_active * L / 2` active symbols.
///
/// `g_active` is real-valued so gradients can reach the mask through it.
pub fn normalize_power_train<T: Scalar>(
    zm: &Tensor<T>,
    g_active: &[T],
    layout: GroupLayout,
) -> Result<(Tensor<T>, NormalizeCache<T>)> {
    let half = s::<T>(layout.length as f64 / 2.0);
    let mut out = zm.clone();
    let mut scale = Vec::with_capacity(g_active.len());
    let mut energy = Vec::with_capacity(g_active.len());
    let mut active_symbols = Vec::with_capacity(g_active.len());
    for (b, &g) in g_active.iter().enumerate() {
        let e: T = zm.outer(b).iter().map(|&v| v * v).sum();
        if !(e > T::zero()) {
            return Err(Error::Degenerate(format!("image {b} has zero transmit power")));
        }
        let n = g * half;
        let k = (n / e).sqrt();
        out.outer_mut(b).iter_mut().for_each(|v| *v = *v * k);
        scale.push(k);
        energy.push(e);
        active_symbols.push(n);
    }
    Ok((
        out,
        NormalizeCache {
            input: zm.clone(),
            scale,
            energy,
            active_symbols,
            length: layout.length,
        },
    ))
}

/// Returns `(dzm, dg_active)`.
pub fn normalize_power_backward<T: Scalar>(
    cache: &NormalizeCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let mut dzm = dy.clone();
    let mut dg = Vec::with_capacity(cache.scale.len());
    let half = s::<T>(cache.length as f64 / 2.0);
    for b in 0..cache.scale.len() {
        let (k, e, n) = (cache.scale[b], cache.energy[b], cache.active_symbols[b]);
        let x = cache.input.outer(b);
        let proj: T = x.iter().zip(dy.outer(b)).map(|(&a, &g)| a * g).sum();
        let coef = proj * k / e;
        for (d, &xv) in dzm.outer_mut(b).iter_mut().zip(x) {
            *d = *d * k - coef * xv;
        }
        let two = s::<T>(2.0);
        dg.push(proj * k / (two * n) * half);
    }
    (dzm, dg)
}

/// Adds real-layout AWGN (`σ²/2` per component) to the first `g_active[b]`
/// groups of each image.
pub fn add_awgn_real<T: Scalar>(
    x: &Tensor<T>,
    g_active: &[usize],
    snr_db: &[f64],
    layout: GroupLayout,
    rng: &mut impl rand::Rng,
) -> Tensor<T> {
    let mut out = x.clone();
    for b in 0..x.dim(0) {
        let std = (snr_to_noise_variance(SnrDb(snr_db[b])) / 2.0).sqrt();
        let n = g_active[b] * layout.length;
        for v in &mut out.outer_mut(b)[..n] {
            let z: f64 = StandardNormal.sample(rng);
            *v = *v + s::<T>(z * std);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layout() -> GroupLayout {
        GroupLayout::new(4, 4, 8).unwrap()
    }

    #[test]
    fn maps_halves_to_real_and_imag() {
        let f = GroupedFeatures::new(
            Tensor::from_vec(&[1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]),
            GroupLayout::new(1, 0, 4).unwrap(),
        )
        .unwrap();
        let frame = map_to_complex(&f);
        assert_eq!(frame.symbols, vec![Complex::new(1.0, 3.0), Complex::new(2.0, 4.0)]);
    }

    #[test]
    fn odd_group_length_is_a_config_error() {
        assert!(matches!(GroupLayout::new(4, 4, 7), Err(Error::Config(_))));
    }

    #[test]
    fn snr_variance_table() {
        let v = |db| snr_to_noise_variance(SnrDb::new(db).unwrap());
        assert_eq!(v(0.0), 1.0);
        assert!((v(20.0) - 0.01).abs() < 1e-15);
        assert!((v(10.0) - 0.1).abs() < 1e-15);
        assert!(SnrDb::new(f64::NAN).is_err());
    }

    #[test]
    fn uniform_magnitude_normalizes_to_one() {
        let l = GroupLayout::new(1, 1, 4).unwrap();
        let f = GroupedFeatures::new(Tensor::full(&[1, 2, 4], 3.0f64), l).unwrap();
        let out = power_normalize(&map_to_complex(&f), &[ThermometerMask::from_count(1, 1)]).unwrap();
        assert!(out.symbols.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unit_power_frame_is_a_fixed_point() {
        let l = GroupLayout::new(1, 1, 4).unwrap();
        // One active group (the non-selective one) holding (1+0i), (0+1i).
        let data = vec![1.0f64, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let f = GroupedFeatures::new(Tensor::from_vec(&[1, 2, 4], data), l).unwrap();
        let frame = map_to_complex(&f);
        let out = power_normalize(&frame, &[ThermometerMask::from_count(0, 1)]).unwrap();
        assert_eq!(out.image(0)[..2], frame.image(0)[..2]);
        assert_eq!(out.g_active, vec![1]);
    }

    #[test]
    fn zero_active_power_is_degenerate() {
        let f = GroupedFeatures::new(Tensor::<f64>::zeros(&[1, 8, 8]), layout()).unwrap();
        let r = power_normalize(&map_to_complex(&f), &[ThermometerMask::from_count(2, 4)]);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn mixed_mask_normalizes_active_groups_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = GroupedFeatures::new(Tensor::from_vec(&[1, 8, 8], data), layout()).unwrap();
        let mask = ThermometerMask::new(vec![true, true, false, false]).unwrap();
        let out = power_normalize(&map_to_complex(&f), &[mask]).unwrap();
        // Recompute by explicit summation over the six active groups.
        let img = out.image(0);
        let p: f64 = img[..6 * 4].iter().map(|c| c.re * c.re + c.im * c.im).sum::<f64>() / 24.0;
        assert!((p - 1.0).abs() < 1e-5);
        assert!(img[6 * 4..].iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let f = GroupedFeatures::new(Tensor::full(&[1, 8, 8], 0.5f64), layout()).unwrap();
        let frame = map_to_complex(&f);
        assert_eq!(Channel::Noiseless.transmit(&frame, 9), frame);
    }

    #[test]
    fn awgn_is_seed_deterministic_and_skips_inactive() {
        let f = GroupedFeatures::new(Tensor::full(&[2, 8, 8], 0.5f64), layout()).unwrap();
        let masks = [ThermometerMask::from_count(1, 4), ThermometerMask::from_count(4, 4)];
        let frame = power_normalize(&map_to_complex(&f), &masks).unwrap();
        let snr = SnrDb::new(0.0).unwrap();
        let a = awgn_transmit(&frame, snr, 11);
        assert_eq!(a, awgn_transmit(&frame, snr, 11));
        assert_ne!(a, awgn_transmit(&frame, snr, 12));
        assert!(a.image(0)[5 * 4..].iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn cpp_table_and_errors() {
        assert_eq!(compute_cpp(8, 128, 32, 32).unwrap(), 0.5);
        assert_eq!(compute_cpp(4, 128, 32, 32).unwrap(), 0.25);
        assert_eq!(compute_cpp(5, 128, 32, 32).unwrap(), 0.3125);
        assert!(compute_cpp(0, 128, 32, 32).is_err());
        assert!(compute_cpp(4, 128, 0, 32).is_err());
    }

    #[test]
    fn zero_pad_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = GroupedFeatures::new(Tensor::from_vec(&[1, 8, 8], data.clone()), layout()).unwrap();
        let frame = map_to_complex(&f);
        // All active: plain inverse map.
        assert_eq!(zero_pad_inactive(&frame).unwrap(), f);
        // Zero selective groups: groups G_n..G all zero.
        let mut none = frame.clone();
        none.g_active = vec![4];
        let padded = zero_pad_inactive(&none).unwrap();
        assert_eq!(&padded.data.data()[..32], &data[..32]);
        assert!(padded.data.data()[32..].iter().all(|&v| v == 0.0));
        // Inconsistent metadata.
        let mut bad = frame.clone();
        bad.g_active = vec![9];
        assert!(matches!(zero_pad_inactive(&bad), Err(Error::Framing(_))));
        bad.g_active = vec![3];
        assert!(matches!(zero_pad_inactive(&bad), Err(Error::Framing(_))));
    }

    #[test]
    fn noiseless_round_trip_keeps_active_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = GroupedFeatures::new(Tensor::from_vec(&[1, 8, 8], data.clone()), layout()).unwrap();
        let mut frame = map_to_complex(&f);
        frame.g_active = vec![layout().active_groups(&ThermometerMask::new(vec![true, true, true, false]).unwrap())];
        let out = zero_pad_inactive(&Channel::Noiseless.transmit(&frame, 0)).unwrap();
        assert_eq!(&out.data.data()[..56], &data[..56]);
        assert!(out.data.data()[56..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_dump_round_trip() {
        let f = GroupedFeatures::new(
            Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| i as f32 * 0.25).collect()),
            layout(),
        )
        .unwrap();
        let mut frame = map_to_complex(&f);
        frame.g_active = vec![6];
        let mut buf = Vec::new();
        write_frame_dump(&frame, 0, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * 4 * 8);
        assert_eq!(&buf[..4], &4u32.to_le_bytes());
        assert_eq!(&buf[12..16], &6u32.to_le_bytes());
        // First symbol: (f[0], f[4]) = (0.0, 1.0)
        assert_eq!(&buf[16..20], &0f32.to_le_bytes());
        assert_eq!(&buf[20..24], &1f32.to_le_bytes());
        let back = read_frame_dump(buf.as_slice()).unwrap();
        assert_eq!(back, frame);
    }

    #[test]
    fn real_layout_normalization_matches_complex_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = layout();
        let z = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let counts = [0usize, 2, 4];
        let masks: Vec<_> = counts.iter().map(|&c| ThermometerMask::from_count(c, 4)).collect();
        let mvals = Tensor::from_vec(
            &[3, 4],
            masks.iter().flat_map(|m| m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 })).collect(),
        );
        let zm = apply_group_mask(&z, &mvals, l);
        let g: Vec<f64> = counts.iter().map(|&c| (4 + c) as f64).collect();
        let (real, _) = normalize_power_train(&zm, &g, l).unwrap();
        let complex = power_normalize(
            &map_to_complex(&GroupedFeatures::new(z, l).unwrap()),
            &masks,
        )
        .unwrap();
        let back = unmap_from_complex(&complex);
        for (a, b) in real.data().iter().zip(back.data.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
