//! Inter-channel spatial cues and their per-frequency normalization.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::scene::Manifest;
use crate::signal::{FrameSpec, StftEngine};

/// Magnitude floor applied before logarithms and divisions.
pub const MAG_FLOOR: f64 = 1e-8;
pub const NORM_EPS: f64 = 1e-5;
pub const FEATURE_CHANNELS: usize = 7;

/// Names of the normalized spatial features, in stack order.
pub const SPATIAL_FEATURES: [&str; 3] = ["cos_ipd", "sin_ipd", "ild"];

/// Phase and level difference of `x2` relative to `x1`, elementwise.
///
/// IPD lies in (−π, π]; ILD is in dB with both magnitudes floored.
pub fn interchannel_features(x1: &[Complex64], x2: &[Complex64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() {
        bail!(Shape, "channel sizes differ: {} vs {}", x1.len(), x2.len());
    }
    let mut ipd = Vec::with_capacity(x1.len());
    let mut ild = Vec::with_capacity(x1.len());
    for (a, b) in x1.iter().zip(x2) {
        ipd.push(wrap_phase((b * a.conj()).arg()));
        ild.push(20.0 * (b.norm().max(MAG_FLOOR).log10() - a.norm().max(MAG_FLOOR).log10()));
    }
    Ok((ipd, ild))
}

/// Wraps a phase into (−π, π].
pub fn wrap_phase(p: f64) -> f64 {
    let mut v = (p + PI).rem_euclid(2.0 * PI) - PI;
    if v <= -PI {
        v += 2.0 * PI;
    }
    v
}

/// Per-frequency mean and variance of each spatial feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// `mean[feature][bin]`, features ordered as [`SPATIAL_FEATURES`].
    pub mean: [Vec<f64>; 3],
    pub var: [Vec<f64>; 3],
    pub eps: f64,
}

impl NormStats {
    /// Zero mean, unit variance: normalization is the identity.
    pub fn neutral(bins: usize) -> Self {
        Self {
            mean: std::array::from_fn(|_| vec![0.0; bins]),
            var: std::array::from_fn(|_| vec![1.0; bins]),
            eps: 0.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.mean[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.bins();
        if self.mean.iter().chain(&self.var).any(|v| v.len() != f) {
            bail!(Shape, "norm stats arrays disagree on bin count");
        }
        if self.var.iter().flatten().any(|v| !(*v >= 0.0)) || !(self.eps >= 0.0) {
            bail!(Numerical, "norm stats hold a negative or NaN variance");
        }
        Ok(())
    }

    /// Writes `bin,feature,mean,var` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("bin,feature,mean,var\n");
        for f in 0..self.bins() {
            for (k, name) in SPATIAL_FEATURES.iter().enumerate() {
                out.push_str(&format!("{f},{name},{},{}\n", self.mean[k][f], self.var[k][f]));
            }
        }
        std::fs::File::create(path)
            .and_then(|mut file| file.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Single-pass (Welford) accumulator for [`NormStats`].
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    count: u64,
    mean: [Vec<f64>; 3],
    m2: [Vec<f64>; 3],
}

impl NormAccumulator {
    pub fn new(bins: usize) -> Self {
        Self {
            count: 0,
            mean: std::array::from_fn(|_| vec![0.0; bins]),
            m2: std::array::from_fn(|_| vec![0.0; bins]),
        }
    }

    pub fn frames_seen(&self) -> u64 {
        self.count
    }

    /// Adds every frame of a two-channel `(frames, bins)` spectrogram pair.
    pub fn push(&mut self, x1: &[Complex64], x2: &[Complex64]) -> Result<()> {
        let bins = self.mean[0].len();
        if bins == 0 || x1.len() % bins != 0 {
            bail!(Shape, "{} values are not whole frames of {bins} bins", x1.len());
        }
        let (ipd, ild) = interchannel_features(x1, x2)?;
        for t in 0..x1.len() / bins {
            self.count += 1;
            let n = self.count as f64;
            for f in 0..bins {
                let i = t * bins + f;
                let vals = [ipd[i].cos(), ipd[i].sin(), ild[i]];
                for (k, v) in vals.into_iter().enumerate() {
                    let d = v - self.mean[k][f];
                    self.mean[k][f] += d / n;
                    self.m2[k][f] += d * (v - self.mean[k][f]);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<NormStats> {
        if self.count == 0 {
            bail!(Resource, "no frames accumulated for normalization stats");
        }
        let n = self.count as f64;
        Ok(NormStats {
            mean: self.mean,
            var: self.m2.map(|v| v.into_iter().map(|m| (m / n).max(0.0)).collect()),
            eps: NORM_EPS,
        })
    }
}

/// Network input features laid out channels-last:
/// `data[(frame * bins + bin) * 7 + channel]` with channels
/// `[Re X1, Im X1, Re X2, Im X2, cos IPD, sin IPD, ILD]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FeatureStack {
    pub fn channels(&self) -> usize {
        FEATURE_CHANNELS
    }

    pub fn get(&self, t: usize, f: usize, ch: usize) -> f64 {
        self.data[(t * self.bins + f) * FEATURE_CHANNELS + ch]
    }
}

/// Builds the 7-channel stack from reference (`x1`) and structured (`x2`)
/// spectrograms of `frames * stats.bins()` values each.
pub fn encode_features(x1: &[Complex64], x2: &[Complex64], stats: &NormStats) -> Result<FeatureStack> {
    let bins = stats.bins();
    if bins == 0 || x1.len() % bins != 0 {
        bail!(Shape, "{} values do not match {bins} stats bins", x1.len());
    }
    let (ipd, ild) = interchannel_features(x1, x2)?;
    let frames = x1.len() / bins;
    let mut data = Vec::with_capacity(x1.len() * FEATURE_CHANNELS);
    for i in 0..x1.len() {
        let f = i % bins;
        let spatial = [ipd[i].cos(), ipd[i].sin(), ild[i]];
        data.extend_from_slice(&[x1[i].re, x1[i].im, x2[i].re, x2[i].im]);
        for (k, v) in spatial.into_iter().enumerate() {
            data.push((v - stats.mean[k][f]) / (stats.var[k][f] + stats.eps).sqrt());
        }
    }
    Ok(FeatureStack { bins, frames, data })
}

/// Fits stats over every frame of the first `max_records` mixtures, in
/// manifest order.
pub fn fit_norm_stats(manifest: &Manifest, frame_spec: &FrameSpec, max_records: usize) -> Result<NormStats> {
    if manifest.records.is_empty() {
        bail!(Resource, "empty manifest");
    }
    let engine = StftEngine::new(frame_spec.clone());
    let mut acc = NormAccumulator::new(frame_spec.bins());
    for rec in manifest.records.iter().take(max_records.max(1)) {
        let mix = manifest.mixture(rec)?;
        let x1 = engine.stft_channel(mix.channel(0))?;
        let x2 = engine.stft_channel(mix.channel(1))?;
        acc.push(&x1, &x2)?;
    }
    acc.finish()
}

/// Frame-averaged complex ratio `X / X_ref` per frequency bin.
///
/// Cells where the reference magnitude is below [`MAG_FLOOR`] are skipped;
/// a bin with no usable frames reports zero.
pub fn signal_ratio(x: &[f64], x_ref: &[f64], frame_spec: &FrameSpec) -> Result<Vec<Complex64>> {
    if x.len() != x_ref.len() {
        bail!(Shape, "signal lengths differ: {} vs {}", x.len(), x_ref.len());
    }
    let engine = StftEngine::new(frame_spec.clone());
    let a = engine.stft_channel(x)?;
    let r = engine.stft_channel(x_ref)?;
    let bins = frame_spec.bins();
    let mut sum = vec![Complex64::new(0.0, 0.0); bins];
    let mut count = vec![0usize; bins];
    for (i, (num, den)) in a.iter().zip(&r).enumerate() {
        if den.norm() >= MAG_FLOOR {
            sum[i % bins] += num / den;
            count[i % bins] += 1;
        }
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { s } else { s / c as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identical_channels_have_no_differences() {
        let x = vec![c(1.0, 2.0), c(-0.3, 0.1), c(0.0, 0.0)];
        let (ipd, ild) = interchannel_features(&x, &x).unwrap();
        assert!(ipd.iter().chain(&ild).all(|v| *v == 0.0));
    }

    #[test]
    fn double_magnitude_is_six_db() {
        let x1 = vec![c(0.3, -0.4)];
        let x2 = vec![c(0.6, -0.8)];
        let (ipd, ild) = interchannel_features(&x1, &x2).unwrap();
        assert!(ipd[0].abs() < 1e-15);
        assert!((ild[0] - 6.020599913279624).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(matches!(
            interchannel_features(&[c(1.0, 0.0)], &[]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn delayed_tone_ipd_follows_linear_phase() {
        let spec = FrameSpec::default();
        let k = 20;
        let d = 3usize;
        let f = k as f64 * 24000.0 / 288.0;
        let n = 4800;
        let tone = |shift: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (2.0 * PI * f * (i as f64 - shift as f64) / 24000.0).sin())
                .collect()
        };
        let (x1, x2) = (tone(0), tone(d));
        let engine = StftEngine::new(spec.clone());
        let s1 = engine.stft_channel(&x1).unwrap();
        let s2 = engine.stft_channel(&x2).unwrap();
        let (ipd, _) = interchannel_features(&s1, &s2).unwrap();
        let t = 10;
        let expected = wrap_phase(-2.0 * PI * f * d as f64 / 24000.0);
        assert!((ipd[t * spec.bins() + k] - expected).abs() < 1e-3);
        // Direct DFT oracle on the same interior frame.
        let start = t * 192 - 96;
        let dft = |x: &[f64]| -> Complex64 {
            (0..288)
                .map(|m| {
                    let w = spec.analysis_window()[m];
                    Complex64::from_polar(w * x[start + m], -2.0 * PI * (k * m) as f64 / 288.0)
                })
                .sum()
        };
        let oracle = wrap_phase((dft(&x2) * dft(&x1).conj()).arg());
        assert!((oracle - expected).abs() < 1e-3);
    }

    #[test]
    fn neutral_stats_are_identity() {
        let x1 = vec![c(1.0, 0.5), c(-0.2, 0.3)];
        let x2 = vec![c(0.1, 0.9), c(0.4, -0.6)];
        let stack = encode_features(&x1, &x2, &NormStats::neutral(2)).unwrap();
        let (ipd, ild) = interchannel_features(&x1, &x2).unwrap();
        for f in 0..2 {
            assert_eq!(stack.get(0, f, 0), x1[f].re);
            assert_eq!(stack.get(0, f, 1), x1[f].im);
            assert_eq!(stack.get(0, f, 2), x2[f].re);
            assert_eq!(stack.get(0, f, 3), x2[f].im);
            assert_eq!(stack.get(0, f, 4), ipd[f].cos());
            assert_eq!(stack.get(0, f, 5), ipd[f].sin());
            assert_eq!(stack.get(0, f, 6), ild[f]);
        }
    }

    #[test]
    fn centered_constant_ild_is_zero() {
        let x1 = vec![c(1.0, 0.0); 6];
        let x2 = vec![c(3.0, 0.0); 6];
        let mut stats = NormStats::neutral(3);
        stats.mean[2] = vec![20.0 * 3f64.log10(); 3];
        let stack = encode_features(&x1, &x2, &stats).unwrap();
        for t in 0..2 {
            for f in 0..3 {
                assert!(stack.get(t, f, 6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_bin_mismatch_rejected() {
        let x = vec![c(1.0, 0.0); 5];
        assert!(encode_features(&x, &x, &NormStats::neutral(2)).is_err());
    }

    fn random_spec(seed: u64, frames: usize, bins: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(seed);
        let mut g = || c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let a = (0..frames * bins).map(|_| g()).collect();
        let b = (0..frames * bins).map(|_| g()).collect();
        (a, b)
    }

    #[test]
    fn welford_matches_two_pass() {
        let bins = 9;
        let (x1, x2) = random_spec(1, 50, bins);
        let mut acc = NormAccumulator::new(bins);
        acc.push(&x1, &x2).unwrap();
        let stats = acc.finish().unwrap();
        let (ipd, ild) = interchannel_features(&x1, &x2).unwrap();
        for f in 0..bins {
            let cols: [Vec<f64>; 3] = [
                (0..50).map(|t| ipd[t * bins + f].cos()).collect(),
                (0..50).map(|t| ipd[t * bins + f].sin()).collect(),
                (0..50).map(|t| ild[t * bins + f]).collect(),
            ];
            for k in 0..3 {
                let m = cols[k].iter().sum::<f64>() / 50.0;
                let v = cols[k].iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 50.0;
                assert!((stats.mean[k][f] - m).abs() < 1e-9);
                assert!((stats.var[k][f] - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_frames_give_zero_variance() {
        let frame = vec![c(1.0, 2.0), c(0.5, -0.5)];
        let other = vec![c(-1.0, 0.2), c(0.7, 0.1)];
        let mut acc = NormAccumulator::new(2);
        for _ in 0..4 {
            acc.push(&frame, &other).unwrap();
        }
        let stats = acc.finish().unwrap();
        assert!(stats.var.iter().flatten().all(|v| *v == 0.0));
        let stack = encode_features(&frame, &other, &stats).unwrap();
        assert!(stack.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_accumulator_is_resource_error() {
        assert!(matches!(NormAccumulator::new(3).finish(), Err(Error::Resource(_))));
    }

    #[test]
    fn self_fitted_normalization_is_standardizing() {
        let bins = 7;
        let (x1, x2) = random_spec(5, 200, bins);
        let mut acc = NormAccumulator::new(bins);
        acc.push(&x1, &x2).unwrap();
        let stats = acc.finish().unwrap();
        let stack = encode_features(&x1, &x2, &stats).unwrap();
        for f in 0..bins {
            for ch in 4..7 {
                let vals: Vec<f64> = (0..200).map(|t| stack.get(t, f, ch)).collect();
                let m = vals.iter().sum::<f64>() / 200.0;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 200.0;
                assert!(m.abs() <= 1e-6);
                assert!((v - 1.0).abs() <= 1e-3, "var {v}");
            }
        }
    }

    #[test]
    fn csv_has_three_rows_per_bin() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        NormStats::neutral(4).write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 1 + 12);
        assert!(text.lines().nth(3).unwrap().starts_with("0,ild,"));
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn ratio_of_identical_and_scaled_signals() {
        let spec = FrameSpec::default();
        let x = noise(2, 4800);
        let r = signal_ratio(&x, &x, &spec).unwrap();
        assert!(r.iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-12));
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = signal_ratio(&x2, &x, &spec).unwrap();
        assert!(r.iter().all(|v| (v - c(2.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn ratio_of_delayed_tone_has_unit_magnitude_and_linear_phase() {
        let spec = FrameSpec::default();
        let k = 30;
        let f = k as f64 * 24000.0 / 288.0;
        let tone = |shift: f64| -> Vec<f64> {
            (0..9600)
                .map(|i| (2.0 * PI * f * (i as f64 - shift) / 24000.0).cos())
                .collect()
        };
        let r = signal_ratio(&tone(2.0), &tone(0.0), &spec).unwrap();
        // Edge frames see the zero padding; the average stays close.
        assert!((r[k].norm() - 1.0).abs() < 0.02);
        let expected = wrap_phase(-2.0 * PI * f * 2.0 / 24000.0);
        assert!((r[k].arg() - expected).abs() < 0.02);
    }

    #[test]
    fn ratio_length_mismatch_rejected() {
        assert!(matches!(
            signal_ratio(&[0.0; 400], &[0.0; 401], &FrameSpec::default()),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn swapping_channels_negates_cues(re1 in -5.0..5.0f64, im1 in -5.0..5.0f64, re2 in -5.0..5.0f64, im2 in -5.0..5.0f64) {
            let a = [c(re1, im1)];
            let b = [c(re2, im2)];
            let (p1, l1) = interchannel_features(&a, &b).unwrap();
            let (p2, l2) = interchannel_features(&b, &a).unwrap();
            prop_assert_eq!(l1[0], -l2[0]);
            prop_assert!(wrap_phase(p1[0] + p2[0]).abs() < 1e-12);
        }

        #[test]
        fn common_scaling_and_rotation_leave_cues(re1 in 0.1..5.0f64, im1 in -5.0..5.0f64, re2 in 0.1..5.0f64, im2 in -5.0..5.0f64, k in 0.01..100.0f64, rot in -3.0..3.0f64) {
            let a = [c(re1, im1)];
            let b = [c(re2, im2)];
            let z = Complex64::from_polar(k, rot);
            let (p1, l1) = interchannel_features(&a, &b).unwrap();
            let (p2, l2) = interchannel_features(&[a[0] * z], &[b[0] * z]).unwrap();
            prop_assert!((l1[0] - l2[0]).abs() < 1e-9);
            prop_assert!(wrap_phase(p1[0] - p2[0]).abs() < 1e-9);
        }

        #[test]
        fn trig_channels_lie_on_unit_circle(re1 in -5.0..5.0f64, im1 in -5.0..5.0f64, re2 in -5.0..5.0f64, im2 in -5.0..5.0f64) {
            let (p, _) = interchannel_features(&[c(re1, im1)], &[c(re2, im2)]).unwrap();
            let s = p[0].cos().powi(2) + p[0].sin().powi(2);
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p[0] > -PI && p[0] <= PI);
        }
    }
}
