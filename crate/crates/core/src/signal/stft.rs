use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{bail, Result};

/// Frame geometry plus an analysis window and its canonical dual.
///
/// The synthesis window is `w_s[n] = w_a[n] / sum_k w_a[n - k*hop]^2`, so
/// weighted overlap-add reconstructs any signal exactly as long as the
/// denominator never vanishes. Signals are zero padded by
/// `pad = window_len - hop` samples in front, which makes reconstruction
/// exact from the very first sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrameGeometry", into = "FrameGeometry")]
pub struct FrameSpec {
    window_len: usize,
    hop: usize,
    pad: usize,
    analysis_window: Vec<f64>,
    synthesis_window: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct FrameGeometry {
    window_len: usize,
    hop: usize,
}

impl TryFrom<FrameGeometry> for FrameSpec {
    type Error = crate::Error;

    fn try_from(g: FrameGeometry) -> Result<Self> {
        FrameSpec::new(g.window_len, g.hop)
    }
}

impl From<FrameSpec> for FrameGeometry {
    fn from(f: FrameSpec) -> Self {
        FrameGeometry {
            window_len: f.window_len,
            hop: f.hop,
        }
    }
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec::new(288, 192).expect("default frame geometry is valid")
    }
}

impl FrameSpec {
    /// Periodic Hann analysis window.
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        let window = (0..window_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / window_len as f64).cos())
            .collect();
        Self::with_analysis_window(window, hop)
    }

    pub fn with_analysis_window(analysis_window: Vec<f64>, hop: usize) -> Result<Self> {
        let window_len = analysis_window.len();
        if window_len < 2 || window_len % 2 != 0 {
            bail!(Argument, "window length {window_len} must be even and >= 2");
        }
        if hop == 0 || hop > window_len {
            bail!(Argument, "hop {hop} must be in 1..={window_len}");
        }
        let mut synthesis_window = vec![0.0; window_len];
        for n in 0..window_len {
            let mut denom = 0.0;
            let mut m = n % hop;
            while m < window_len {
                denom += analysis_window[m] * analysis_window[m];
                m += hop;
            }
            if denom <= 1e-12 {
                bail!(
                    Argument,
                    "overlap-add denominator vanishes at window index {n} (window {window_len}, hop {hop})"
                );
            }
            synthesis_window[n] = analysis_window[n] / denom;
        }
        Ok(Self {
            window_len,
            hop,
            pad: window_len - hop,
            analysis_window,
            synthesis_window,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn analysis_window(&self) -> &[f64] {
        &self.analysis_window
    }

    pub fn synthesis_window(&self) -> &[f64] {
        &self.synthesis_window
    }

    /// Frames needed so that every input sample is covered by all the
    /// frames that overlap it.
    pub fn frame_count(&self, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        (len - 1 + self.pad) / self.hop + 1
    }
}

/// One-sided complex spectrogram, `data[channel][frame * bins + bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    data: Vec<Vec<Complex64>>,
}

impl Spectrogram {
    pub fn zeros(channels: usize, bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![vec![Complex64::new(0.0, 0.0); bins * frames]; channels],
        }
    }

    pub fn from_channels(bins: usize, frames: usize, data: Vec<Vec<Complex64>>) -> Result<Self> {
        if let Some(c) = data.iter().find(|c| c.len() != bins * frames) {
            bail!(Shape, "channel of {} values, expected {bins}x{frames}", c.len());
        }
        Ok(Self { bins, frames, data })
    }

    pub fn num_channels(&self) -> usize {
        self.data.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channel(&self, ch: usize) -> &[Complex64] {
        &self.data[ch]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [Complex64] {
        &mut self.data[ch]
    }

    pub fn frame(&self, ch: usize, t: usize) -> &[Complex64] {
        &self.data[ch][t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, ch: usize, t: usize, f: usize) -> Complex64 {
        self.data[ch][t * self.bins + f]
    }

    pub fn scale(&mut self, k: f64) {
        for c in &mut self.data {
            for v in c.iter_mut() {
                *v *= k;
            }
        }
    }
}

/// Reusable forward/inverse transforms for one [`FrameSpec`].
#[derive(Clone)]
pub struct StftEngine {
    spec: FrameSpec,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("spec", &self.spec).finish()
    }
}

impl StftEngine {
    pub fn new(spec: FrameSpec) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(spec.window_len);
        let inverse = planner.plan_fft_inverse(spec.window_len);
        Self {
            spec,
            forward,
            inverse,
        }
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    /// Windowed DFT of one frame of `window_len` samples.
    pub fn analyze(&self, frame: &[f64], out: &mut [Complex64]) {
        let mut buf: Vec<f64> = frame
            .iter()
            .zip(&self.spec.analysis_window)
            .map(|(x, w)| x * w)
            .collect();
        self.forward
            .process(&mut buf, out)
            .expect("buffer sizes match the plan");
    }

    /// Inverse DFT of one frame, multiplied by the synthesis window. The
    /// imaginary parts of the DC and Nyquist bins are ignored.
    pub fn synthesize(&self, bins: &[Complex64], out: &mut [f64]) {
        let mut spec = bins.to_vec();
        let last = spec.len() - 1;
        spec[0].im = 0.0;
        spec[last].im = 0.0;
        self.inverse
            .process(&mut spec, out)
            .expect("buffer sizes match the plan");
        let norm = 1.0 / self.spec.window_len as f64;
        for (o, w) in out.iter_mut().zip(&self.spec.synthesis_window) {
            *o *= w * norm;
        }
    }

    pub fn stft_channel(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        let s = &self.spec;
        if x.len() + 2 * s.pad < s.window_len || x.is_empty() {
            bail!(
                Size,
                "signal of {} samples is shorter than one padded frame ({})",
                x.len(),
                s.window_len
            );
        }
        let frames = s.frame_count(x.len());
        let bins = s.bins();
        let mut out = vec![Complex64::new(0.0, 0.0); frames * bins];
        let mut frame = vec![0.0; s.window_len];
        for t in 0..frames {
            for (n, slot) in frame.iter_mut().enumerate() {
                let idx = (t * s.hop + n) as isize - s.pad as isize;
                *slot = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
            }
            self.analyze(&frame, &mut out[t * bins..(t + 1) * bins]);
        }
        Ok(out)
    }

    pub fn istft_channel(&self, spec: &[Complex64], frames: usize, out_len: usize) -> Vec<f64> {
        let s = &self.spec;
        let bins = s.bins();
        let padded_len = (frames.saturating_sub(1)) * s.hop + s.window_len;
        let mut acc = vec![0.0; padded_len.max(s.pad + out_len)];
        let mut frame = vec![0.0; s.window_len];
        for t in 0..frames {
            self.synthesize(&spec[t * bins..(t + 1) * bins], &mut frame);
            for (n, v) in frame.iter().enumerate() {
                acc[t * s.hop + n] += v;
            }
        }
        acc[s.pad..s.pad + out_len].to_vec()
    }
}

pub fn stft(buffer: &AudioBuffer, frame_spec: &FrameSpec) -> Result<Spectrogram> {
    let engine = StftEngine::new(frame_spec.clone());
    let frames = frame_spec.frame_count(buffer.len());
    let data = buffer
        .channels()
        .iter()
        .map(|c| engine.stft_channel(c))
        .collect::<Result<Vec<_>>>()?;
    Spectrogram::from_channels(frame_spec.bins(), frames, data)
}

pub fn istft(spectrogram: &Spectrogram, frame_spec: &FrameSpec, out_len: usize) -> Result<AudioBuffer> {
    if spectrogram.bins() != frame_spec.bins() {
        bail!(
            Shape,
            "spectrogram has {} bins, frame spec expects {}",
            spectrogram.bins(),
            frame_spec.bins()
        );
    }
    let engine = StftEngine::new(frame_spec.clone());
    let channels = (0..spectrogram.num_channels())
        .map(|ch| engine.istft_channel(spectrogram.channel(ch), spectrogram.frames(), out_len))
        .collect();
    AudioBuffer::new(channels)
}
