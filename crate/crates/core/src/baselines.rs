//! Classical far-field beamformers on the auxiliary mic array.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::net::AngleQuery;
use crate::scene::{distance, Point, ReceiverRig};
use crate::signal::{AudioBuffer, FrameSpec, StftEngine, SAMPLE_RATE, SPEED_OF_SOUND};

/// Diagonal loading relative to the mean eigenvalue, `δ·tr(R)/M`.
pub const DIAGONAL_LOADING: f64 = 1e-3;

pub const MAX_APERTURE: f64 = 0.2;

/// Mic positions in the device frame (metres, device 0° along +x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    positions: Vec<Point>,
}

impl ArrayGeometry {
    /// Accepts 1 to 6 distinct mics spanning at most 0.2 m. A single mic
    /// is allowed so the trivial beamformer can be expressed.
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        let m = positions.len();
        if !(1..=6).contains(&m) {
            bail!(Argument, "array needs 1 to 6 mics, got {m}");
        }
        for i in 0..m {
            for j in i + 1..m {
                let d = distance(&positions[i], &positions[j]);
                if d < 1e-9 {
                    bail!(Argument, "mics {i} and {j} coincide");
                }
                if d > MAX_APERTURE + 1e-12 {
                    bail!(Argument, "aperture {d} m exceeds {MAX_APERTURE} m");
                }
            }
        }
        Ok(Self { positions })
    }

    /// Uniform circular array in the horizontal plane, first mic at 0°.
    pub fn circular(m: usize, radius: f64) -> Result<Self> {
        Self::new(crate::scene::circular_array([0.0; 3], radius, m, 0.0))
    }

    /// The rig's array, translated to the reference mic and rotated into
    /// the device frame; `channels` selects the first mics only.
    pub fn from_rig(rig: &ReceiverRig, channels: usize) -> Result<Self> {
        let Some(arr) = &rig.array_positions else {
            bail!(Argument, "rig has no array");
        };
        if channels > arr.len() {
            bail!(Argument, "{channels} channels requested, array has {}", arr.len());
        }
        let (s, c) = (-rig.orientation_deg).to_radians().sin_cos();
        let o = rig.ref_mic_pos;
        Self::new(
            arr[..channels]
                .iter()
                .map(|p| {
                    let (x, y) = (p[0] - o[0], p[1] - o[1]);
                    [c * x - s * y, s * x + c * y, p[2] - o[2]]
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn centroid(&self) -> Point {
        let m = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] / m;
            }
        }
        c
    }

    /// Plane-wave arrival delay of each mic relative to the centroid for a
    /// source at horizontal azimuth `theta_deg`.
    pub fn delays(&self, theta_deg: f64) -> Vec<f64> {
        let (s, c) = theta_deg.to_radians().sin_cos();
        let o = self.centroid();
        self.positions
            .iter()
            .map(|p| -((p[0] - o[0]) * c + (p[1] - o[1]) * s) / SPEED_OF_SOUND)
            .collect()
    }
}

/// `a_m = exp(-j 2π f τ_m)`.
pub fn steering_vector(geometry: &ArrayGeometry, theta_deg: f64, f_hz: f64) -> Vec<Complex64> {
    geometry
        .delays(theta_deg)
        .into_iter()
        .map(|tau| Complex64::from_polar(1.0, -2.0 * PI * f_hz * tau))
        .collect()
}

/// Delay-and-sum response magnitude toward `source_deg` when steered at
/// `look_deg`, in `[0, 1]`.
pub fn beampattern(geometry: &ArrayGeometry, look_deg: f64, source_deg: f64, f_hz: f64) -> f64 {
    let a = steering_vector(geometry, look_deg, f_hz);
    let b = steering_vector(geometry, source_deg, f_hz);
    a.iter().zip(&b).map(|(x, y)| x.conj() * y).sum::<Complex64>().norm() / geometry.len() as f64
}

/// Look direction of each selected sector: its centre angle.
pub fn sector_steer(query: &AngleQuery) -> Vec<f64> {
    let width = 180.0 / query.n_sectors as f64;
    query
        .sectors()
        .into_iter()
        .map(|i| (i as f64 - 0.5) * width)
        .collect()
}

fn bin_freq(bin: usize, bins: usize) -> f64 {
    bin as f64 * SAMPLE_RATE as f64 / (2 * (bins - 1)) as f64
}

/// Multichannel spectrogram `x[ch][t * bins + f]`.
fn check_spec(x: &[Vec<Complex64>], bins: usize, geometry: &ArrayGeometry) -> Result<usize> {
    if x.len() != geometry.len() {
        bail!(Shape, "{} channels for a {}-mic geometry", x.len(), geometry.len());
    }
    if bins < 2 || x[0].len() % bins != 0 || x.iter().any(|c| c.len() != x[0].len()) {
        bail!(Shape, "channel spectra do not tile {bins} bins");
    }
    Ok(x[0].len() / bins)
}

/// `Y = aᴴX / M` per cell.
pub fn delay_and_sum(x: &[Vec<Complex64>], bins: usize, theta_deg: f64, geometry: &ArrayGeometry) -> Result<Vec<Complex64>> {
    let frames = check_spec(x, bins, geometry)?;
    let m = geometry.len() as f64;
    let mut y = vec![Complex64::new(0.0, 0.0); frames * bins];
    for f in 0..bins {
        let a = steering_vector(geometry, theta_deg, bin_freq(f, bins));
        for t in 0..frames {
            let i = t * bins + f;
            y[i] = a.iter().zip(x).map(|(am, xm)| am.conj() * xm[i]).sum::<Complex64>() / m;
        }
    }
    Ok(y)
}

/// Sample covariance per bin over the first `frames` frames.
pub fn noise_covariance(x: &[Vec<Complex64>], bins: usize, frames: usize) -> Result<Vec<DMatrix<Complex64>>> {
    let m = x.len();
    let total = x.first().map_or(0, |c| c.len() / bins.max(1));
    if frames == 0 || frames > total {
        bail!(Argument, "{frames} noise frames requested from {total}");
    }
    Ok((0..bins)
        .map(|f| {
            let mut r = DMatrix::<Complex64>::zeros(m, m);
            for t in 0..frames {
                let v = DVector::from_iterator(m, x.iter().map(|c| c[t * bins + f]));
                r += &v * v.adjoint();
            }
            r / Complex64::new(frames as f64, 0.0)
        })
        .collect())
}

/// `w = R⁻¹a / (aᴴR⁻¹a)` after loading `R` with `δ·tr(R)/M` on the diagonal.
pub fn mvdr_weights(r: &DMatrix<Complex64>, a: &[Complex64], loading: f64) -> Result<Vec<Complex64>> {
    let m = a.len();
    if r.nrows() != m || r.ncols() != m {
        bail!(Shape, "covariance {}x{} for {m} mics", r.nrows(), r.ncols());
    }
    let tr = r.trace().re;
    let loaded = r + DMatrix::<Complex64>::identity(m, m) * Complex64::new(loading * tr / m as f64, 0.0);
    let av = DVector::from_column_slice(a);
    let Some(ria) = loaded.clone().lu().solve(&av) else {
        bail!(Numerical, "covariance is singular after loading");
    };
    let denom = av.dotc(&ria);
    if !(denom.norm() > 1e-300) || !denom.re.is_finite() {
        bail!(Numerical, "degenerate MVDR normalization {denom}");
    }
    Ok(ria.iter().map(|v| v / denom).collect())
}

/// MVDR toward `theta_deg` with the noise covariance taken from the first
/// `noise_frames` frames.
pub fn mvdr(
    x: &[Vec<Complex64>],
    bins: usize,
    theta_deg: f64,
    geometry: &ArrayGeometry,
    noise_frames: usize,
) -> Result<Vec<Complex64>> {
    let frames = check_spec(x, bins, geometry)?;
    if noise_frames < geometry.len() {
        bail!(Argument, "{noise_frames} noise frames cannot estimate a rank-{} covariance", geometry.len());
    }
    let cov = noise_covariance(x, bins, noise_frames)?;
    let mut y = vec![Complex64::new(0.0, 0.0); frames * bins];
    for f in 0..bins {
        let a = steering_vector(geometry, theta_deg, bin_freq(f, bins));
        let w = mvdr_weights(&cov[f], &a, DIAGONAL_LOADING)?;
        for t in 0..frames {
            let i = t * bins + f;
            y[i] = w.iter().zip(x).map(|(wm, xm)| wm.conj() * xm[i]).sum();
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beamformer {
    Das,
    Mvdr,
}

/// Frames lying entirely inside the first `head_samples` of a signal.
pub fn head_frames(spec: &FrameSpec, head_samples: usize) -> usize {
    let reach = head_samples + spec.pad();
    if reach < spec.window_len() {
        0
    } else {
        (reach - spec.window_len()) / spec.hop() + 1
    }
}

/// Beamforms a multichannel recording toward every selected sector and sums
/// the per-sector outputs. MVDR estimates its covariance from the leading
/// `head_samples`, which must hold no target.
pub fn beamform(
    audio: &AudioBuffer,
    geometry: &ArrayGeometry,
    query: &AngleQuery,
    method: Beamformer,
    frame_spec: &FrameSpec,
    head_samples: usize,
) -> Result<Vec<f64>> {
    if audio.num_channels() != geometry.len() {
        bail!(Shape, "{} channels for a {}-mic geometry", audio.num_channels(), geometry.len());
    }
    let engine = StftEngine::new(frame_spec.clone());
    let bins = frame_spec.bins();
    let x = audio
        .channels()
        .iter()
        .map(|c| engine.stft_channel(c))
        .collect::<Result<Vec<_>>>()?;
    let frames = x[0].len() / bins;
    let mut sum = vec![Complex64::new(0.0, 0.0); frames * bins];
    for theta in sector_steer(query) {
        let y = match method {
            Beamformer::Das => delay_and_sum(&x, bins, theta, geometry)?,
            Beamformer::Mvdr => mvdr(&x, bins, theta, geometry, head_frames(frame_spec, head_samples))?,
        };
        for (s, v) in sum.iter_mut().zip(y) {
            *s += v;
        }
    }
    Ok(engine.istft_channel(&sum, frames, audio.len()))
}
