//! Parametric model of a coded-hole cylinder in front of a microphone.
//!
//! Each surface hole behaves as a directional port with a cosine lobe, feeds
//! a tube of some length (a pure delay) and optionally a Helmholtz cavity (a
//! second-order peak). The wall leaks a constant, delay-free fraction of the
//! incident sound. For arrival azimuth `theta` the response is
//!
//! ```text
//! M(theta, f) = leak + sum_h g_h(theta) R_h(f) exp(-j 2 pi f tau_h(theta))
//! g_h(theta)  = max(0, cos(theta - phi_h))^p + 0.05
//! tau_h       = tube_h / c - (diameter / 2) cos(theta - phi_h) / c
//! ```
//!
//! The second delay term is the plane-wave arrival offset of the hole on the
//! cylinder surface, which is where the diameter enters.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::signal::{SAMPLE_RATE, SPEED_OF_SOUND};

const LOBE_FLOOR: f64 = 0.05;
pub const DEFAULT_TAPS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonator {
    pub f0: f64,
    pub q: f64,
    pub gain_db: f64,
}

impl Resonator {
    /// Magnitude of an analog peaking section: 1 far from `f0`, `gain_db` at `f0`.
    pub fn magnitude(&self, f: f64) -> f64 {
        let a = 10f64.powf(self.gain_db / 40.0);
        let w0 = self.f0;
        let re = w0 * w0 - f * f;
        let num = Complex64::new(re, f * w0 * a / self.q);
        let den = Complex64::new(re, f * w0 / (a * self.q));
        num.norm() / den.norm()
    }

    pub fn peak_gain(&self) -> f64 {
        10f64.powf(self.gain_db / 20.0).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleSpec {
    pub azimuth_deg: f64,
    pub tube_length: f64,
    #[serde(default)]
    pub resonator: Option<Resonator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrostructureSpec {
    pub diameter: f64,
    pub holes: Vec<HoleSpec>,
    #[serde(default = "default_leakage")]
    pub wall_leakage_db: f64,
    #[serde(default = "default_exponent")]
    pub directivity_exponent: f64,
}

fn default_leakage() -> f64 {
    -33.0
}

fn default_exponent() -> f64 {
    2.0
}

impl Default for MicrostructureSpec {
    /// The shipped six-hole, 20 mm design.
    fn default() -> Self {
        let azimuths = [10.0, 35.0, 60.0, 100.0, 140.0, 170.0];
        let tubes_mm = [5.0, 12.0, 19.0, 26.0, 33.0, 40.0];
        let f0s = [1400.0, 2000.0, 2700.0, 3400.0, 4300.0, 5200.0];
        let holes = (0..6)
            .map(|i| HoleSpec {
                azimuth_deg: azimuths[i],
                tube_length: tubes_mm[i] / 1000.0,
                resonator: Some(Resonator {
                    f0: f0s[i],
                    q: 6.0,
                    gain_db: 8.0,
                }),
            })
            .collect();
        Self {
            diameter: 0.020,
            holes,
            wall_leakage_db: default_leakage(),
            directivity_exponent: default_exponent(),
        }
    }
}

impl MicrostructureSpec {
    /// Angle-independent control: no holes, only wall leakage.
    pub fn flat(wall_leakage_db: f64) -> Self {
        Self {
            diameter: 0.020,
            holes: Vec::new(),
            wall_leakage_db,
            directivity_exponent: default_exponent(),
        }
    }

    /// Same hole layout built at another diameter. Tubes are coiled inside
    /// the cylinder, so their lengths scale with it; cavity resonances scale
    /// inversely with size.
    pub fn scaled(&self, diameter: f64) -> Self {
        let k = diameter / self.diameter;
        let mut out = self.clone();
        out.diameter = diameter;
        for h in &mut out.holes {
            h.tube_length *= k;
            if let Some(r) = &mut h.resonator {
                r.f0 = (r.f0 / k).min(11_900.0);
            }
        }
        out
    }

    pub fn leak(&self) -> f64 {
        10f64.powf(self.wall_leakage_db / 20.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.holes.len() > 16 {
            bail!(Argument, "{} holes, at most 16 allowed", self.holes.len());
        }
        if !(0.005..=0.05).contains(&self.diameter) {
            bail!(Argument, "diameter {} m outside [0.005, 0.05]", self.diameter);
        }
        if self.wall_leakage_db.is_nan() || self.wall_leakage_db > 0.0 {
            bail!(Argument, "wall leakage {} dB must be <= 0", self.wall_leakage_db);
        }
        for (i, h) in self.holes.iter().enumerate() {
            if !(0.0..360.0).contains(&h.azimuth_deg) {
                bail!(Argument, "hole {i} azimuth {} outside [0, 360)", h.azimuth_deg);
            }
            if !(0.0..=0.1).contains(&h.tube_length) {
                bail!(Argument, "hole {i} tube length {} outside [0, 0.1] m", h.tube_length);
            }
            if let Some(r) = &h.resonator {
                if !(r.f0 > 0.0 && r.f0 < 12_000.0) || !(r.q > 0.0) {
                    bail!(Argument, "hole {i} resonator f0={} q={} invalid", r.f0, r.q);
                }
            }
            for (j, o) in self.holes.iter().enumerate().skip(i + 1) {
                if o.azimuth_deg == h.azimuth_deg {
                    bail!(Argument, "holes {i} and {j} share azimuth {}", h.azimuth_deg);
                }
            }
        }
        Ok(())
    }

    /// Continuous response at azimuth `theta_deg` (already folded) and `f` Hz.
    pub fn response(&self, theta_deg: f64, f: f64) -> Complex64 {
        let mut acc = Complex64::new(self.leak(), 0.0);
        let theta = theta_deg.to_radians();
        let radius = self.diameter / 2.0;
        for h in &self.holes {
            let c = (theta - h.azimuth_deg.to_radians()).cos();
            let g = c.max(0.0).powf(self.directivity_exponent) + LOBE_FLOOR;
            let r = h.resonator.map_or(1.0, |r| r.magnitude(f));
            let tau = (h.tube_length - radius * c) / SPEED_OF_SOUND;
            acc += Complex64::from_polar(g * r, -2.0 * PI * f * tau);
        }
        acc
    }

    pub fn magnitude_bound(&self) -> f64 {
        let max_gain = self
            .holes
            .iter()
            .filter_map(|h| h.resonator.map(|r| r.peak_gain()))
            .fold(1.0, f64::max);
        self.holes.len() as f64 * (1.0 + LOBE_FLOOR) * max_gain + self.leak()
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = crate::config::parse_json(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Maps any azimuth in [0, 360) onto the characterized semicircle.
pub fn fold_angle(theta_deg: f64) -> f64 {
    if theta_deg > 180.0 {
        360.0 - theta_deg
    } else {
        theta_deg
    }
}

fn tukey(n: usize, len: usize, alpha: f64) -> f64 {
    let x = n as f64 / (len - 1) as f64;
    let edge = alpha / 2.0;
    if x < edge {
        0.5 * (1.0 - (PI * x / edge).cos())
    } else if x > 1.0 - edge {
        0.5 * (1.0 - (PI * (1.0 - x) / edge).cos())
    } else {
        1.0
    }
}

/// Linear-phase FIR for one arrival angle. The filter is centered on
/// `taps / 2`, which is its bulk latency.
pub fn direction_filter(spec: &MicrostructureSpec, theta_deg: f64, taps: usize) -> Result<Vec<f64>> {
    if !(0.0..360.0).contains(&theta_deg) {
        bail!(Argument, "angle {theta_deg} outside [0, 360)");
    }
    if taps < 64 || !taps.is_power_of_two() {
        bail!(Argument, "tap count {taps} must be a power of two >= 64");
    }
    let theta = fold_angle(theta_deg);
    let fs = SAMPLE_RATE as f64;
    let mut planner = RealFftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(taps);
    let mut bins: Vec<Complex64> = (0..=taps / 2)
        .map(|k| {
            let f = k as f64 * fs / taps as f64;
            let shift = if k % 2 == 0 { 1.0 } else { -1.0 };
            spec.response(theta, f) * shift
        })
        .collect();
    bins[0].im = 0.0;
    bins[taps / 2].im = 0.0;
    let mut h = vec![0.0; taps];
    inv.process(&mut bins, &mut h).expect("sized by plan");
    for (n, v) in h.iter_mut().enumerate() {
        *v *= tukey(n, taps, 0.5) / taps as f64;
    }
    Ok(h)
}

/// Per-angle FIRs realized on a sorted angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionFilterBank {
    spec: MicrostructureSpec,
    angle_grid_deg: Vec<f64>,
    taps: usize,
    filters: Vec<Vec<f64>>,
}

pub fn default_angle_grid() -> Vec<f64> {
    (0..=180).map(|a| a as f64).collect()
}

pub fn realize_bank(spec: &MicrostructureSpec, angle_grid: &[f64], taps: usize) -> Result<DirectionFilterBank> {
    if angle_grid.is_empty() {
        bail!(Argument, "empty angle grid");
    }
    if angle_grid.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Argument, "angle grid must be strictly increasing");
    }
    let filters = angle_grid
        .iter()
        .map(|&a| direction_filter(spec, a, taps))
        .collect::<Result<Vec<_>>>()?;
    Ok(DirectionFilterBank {
        spec: spec.clone(),
        angle_grid_deg: angle_grid.to_vec(),
        taps,
        filters,
    })
}

impl DirectionFilterBank {
    /// Default grid (0..=180 step 1) and tap count.
    pub fn from_spec(spec: &MicrostructureSpec) -> Result<Self> {
        realize_bank(spec, &default_angle_grid(), DEFAULT_TAPS)
    }

    pub fn from_filters(spec: MicrostructureSpec, angle_grid_deg: Vec<f64>, filters: Vec<Vec<f64>>) -> Result<Self> {
        if filters.len() != angle_grid_deg.len() || filters.is_empty() {
            bail!(Shape, "{} filters for {} angles", filters.len(), angle_grid_deg.len());
        }
        let taps = filters[0].len();
        if filters.iter().any(|f| f.len() != taps) {
            bail!(Shape, "filters differ in length");
        }
        Ok(Self {
            spec,
            angle_grid_deg,
            taps,
            filters,
        })
    }

    pub fn spec(&self) -> &MicrostructureSpec {
        &self.spec
    }

    pub fn angles(&self) -> &[f64] {
        &self.angle_grid_deg
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn filter(&self, index: usize) -> &[f64] {
        &self.filters[index]
    }

    /// Bulk delay of every filter, in samples.
    pub fn latency(&self) -> usize {
        self.taps / 2
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for f in &mut out.filters {
            for v in f.iter_mut() {
                *v *= c;
            }
        }
        out
    }

    /// Index of the grid angle closest to `theta_deg` after folding.
    pub fn nearest(&self, theta_deg: f64) -> usize {
        let theta = fold_angle(theta_deg.rem_euclid(360.0));
        let grid = &self.angle_grid_deg;
        let pos = grid.partition_point(|&a| a < theta);
        if pos == 0 {
            0
        } else if pos == grid.len() {
            grid.len() - 1
        } else if theta - grid[pos - 1] <= grid[pos] - theta {
            pos - 1
        } else {
            pos
        }
    }

    /// Magnitude responses `|H_i(f)|` for every filter on `freqs`.
    pub fn magnitudes(&self, freqs: &[f64]) -> Vec<Vec<f64>> {
        let fs = SAMPLE_RATE as f64;
        let twiddles: Vec<Vec<Complex64>> = freqs
            .iter()
            .map(|f| {
                (0..self.taps)
                    .map(|n| Complex64::from_polar(1.0, -2.0 * PI * f * n as f64 / fs))
                    .collect()
            })
            .collect();
        self.filters
            .iter()
            .map(|h| {
                twiddles
                    .iter()
                    .map(|tw| {
                        h.iter()
                            .zip(tw)
                            .map(|(v, w)| w * v)
                            .sum::<Complex64>()
                            .norm()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "angle_deg,tap,value").map_err(io)?;
        for (a, h) in self.angle_grid_deg.iter().zip(&self.filters) {
            for (n, v) in h.iter().enumerate() {
                writeln!(w, "{a},{n},{v:e}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut probe = values.clone();
    if let Some(first) = probe.next() {
        if probe.all(|v| v == first) {
            return 0.0;
        }
    }
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Variance across grid angles of `|M_theta(f)|` for each frequency.
pub fn spatial_diversity(bank: &DirectionFilterBank, freq_grid: &[f64]) -> Vec<f64> {
    let mags = bank.magnitudes(freq_grid);
    (0..freq_grid.len())
        .map(|k| population_variance(mags.iter().map(|m| m[k])))
        .collect()
}

/// Evenly spaced analysis frequencies (25 Hz step) covering `[lo, hi]`.
pub fn band_grid(lo: f64, hi: f64) -> Vec<f64> {
    let step = 25.0;
    let n = ((hi - lo) / step).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// L2 distance between magnitude responses restricted to `[f_lo, f_hi]`.
pub fn pairwise_distance_map(bank: &DirectionFilterBank, f_lo: f64, f_hi: f64) -> Result<Vec<Vec<f64>>> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    if !(f_lo < f_hi) || f_lo < 0.0 || f_hi > nyquist {
        bail!(Argument, "band [{f_lo}, {f_hi}] invalid below Nyquist {nyquist}");
    }
    let mags = bank.magnitudes(&band_grid(f_lo, f_hi));
    let n = mags.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = mags[i]
                .iter()
                .zip(&mags[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub name: String,
    pub mean_diversity: f64,
    pub mean_pairwise_distance: f64,
}

/// Scores each design over `band` and ranks by mean diversity (stable on ties).
pub fn design_sweep(specs: &[(String, MicrostructureSpec)], band: (f64, f64)) -> Result<Vec<DesignSummary>> {
    if specs.len() < 2 {
        bail!(Argument, "a sweep needs at least two designs, got {}", specs.len());
    }
    let grid = band_grid(band.0, band.1);
    let mut out = specs
        .iter()
        .map(|(name, spec)| {
            spec.validate()?;
            let bank = DirectionFilterBank::from_spec(spec)?;
            let v = spatial_diversity(&bank, &grid);
            let d = pairwise_distance_map(&bank, band.0, band.1)?;
            let n = d.len();
            let off: f64 = d.iter().flatten().sum();
            let pairs = (n * n - n).max(1) as f64;
            Ok(DesignSummary {
                name: name.clone(),
                mean_diversity: v.iter().sum::<f64>() / v.len() as f64,
                mean_pairwise_distance: off / pairs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.mean_diversity.total_cmp(&a.mean_diversity));
    Ok(out)
}
