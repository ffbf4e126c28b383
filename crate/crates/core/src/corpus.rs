//! Synthetic speech-like clips: voiced syllables with formant structure,
//! unvoiced onsets and pauses. Stands in for a recorded speech corpus.

use std::f64::consts::TAU;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, Rng};
use crate::scene::CorpusClip;
use crate::signal::{wav_write, AudioBuffer, WavEncoding, SAMPLE_RATE};

/// Rough (F1, F2, F3) targets of a few vowels, in Hz.
const VOWELS: [(f64, f64, f64); 8] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (530.0, 1840.0, 2480.0),
    (300.0, 870.0, 2240.0),
    (570.0, 840.0, 2410.0),
    (660.0, 1720.0, 2410.0),
    (440.0, 1020.0, 2240.0),
    (390.0, 1990.0, 2550.0),
];
const BANDWIDTHS: (f64, f64, f64) = (90.0, 110.0, 170.0);
const BLOCK: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_clips: usize,
    #[serde(default = "default_seconds")]
    pub seconds: f64,
}

fn default_seconds() -> f64 {
    4.0
}

struct Voice {
    f0: f64,
    formant_scale: f64,
    tilt: f64,
}

fn envelope(f: f64, formants: (f64, f64, f64)) -> f64 {
    let peak = |c: f64, b: f64, a: f64| a / (1.0 + ((f - c) / b).powi(2));
    peak(formants.0, BANDWIDTHS.0, 1.0) + peak(formants.1, BANDWIDTHS.1, 0.7) + peak(formants.2, BANDWIDTHS.2, 0.35) + 0.01
}

fn lerp3(a: (f64, f64, f64), b: (f64, f64, f64), t: f64) -> (f64, f64, f64) {
    (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, a.2 + (b.2 - a.2) * t)
}

fn raised(t: f64, n: f64, edge: f64) -> f64 {
    let e = edge.min(n / 2.0).max(1.0);
    if t < e {
        0.5 * (1.0 - (std::f64::consts::PI * t / e).cos())
    } else if t > n - e {
        0.5 * (1.0 - (std::f64::consts::PI * (n - t) / e).cos())
    } else {
        1.0
    }
}

fn voiced(rng: &mut Rng, voice: &Voice, out: &mut [f64]) {
    let fs = SAMPLE_RATE as f64;
    let n = out.len();
    let a = VOWELS[rng.random_range(0..VOWELS.len())];
    let b = VOWELS[rng.random_range(0..VOWELS.len())];
    let s = voice.formant_scale;
    let (a, b) = ((a.0 * s, a.1 * s, a.2 * s), (b.0 * s, b.1 * s, b.2 * s));
    let f0_start = voice.f0 * rng.random_range(0.9..1.15);
    let f0_end = voice.f0 * rng.random_range(0.8..1.05);
    let n_harm = 64;
    let mut phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..TAU)).collect();
    let mut amps = vec![0.0; n_harm];
    for start in (0..n).step_by(BLOCK) {
        let t = start as f64 / n as f64;
        let f0 = f0_start + (f0_end - f0_start) * t;
        let formants = lerp3(a, b, t);
        for (h, amp) in amps.iter_mut().enumerate() {
            let f = f0 * (h + 1) as f64;
            *amp = if f < 0.45 * fs {
                envelope(f, formants) / ((h + 1) as f64).powf(voice.tilt)
            } else {
                0.0
            };
        }
        let end = (start + BLOCK).min(n);
        for (i, slot) in out[start..end].iter_mut().enumerate() {
            let tt = (start + i) as f64;
            let mut v = 0.0;
            for (h, (ph, amp)) in phases.iter_mut().zip(&amps).enumerate() {
                if *amp == 0.0 {
                    continue;
                }
                v += amp * ph.sin();
                *ph += TAU * f0 * (h + 1) as f64 / fs;
            }
            *slot += v * raised(tt, n as f64, 0.02 * fs);
        }
        for ph in phases.iter_mut() {
            *ph %= TAU;
        }
    }
}

fn unvoiced(rng: &mut Rng, out: &mut [f64], level: f64) {
    let fs = SAMPLE_RATE as f64;
    let fc: f64 = rng.random_range(2500.0..7500.0);
    let q = rng.random_range(1.5..4.0);
    // Two-pole resonator (band-pass biquad).
    let w = TAU * fc / fs;
    let alpha = w.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let n = out.len() as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        (x2, x1, y2, y1) = (x1, x, y1, y);
        *slot += level * y * raised(i as f64, n, 0.005 * fs);
    }
}

/// One clip of `seconds` length, peak-normalized to 0.5.
pub fn synthesize_clip(rng: &mut Rng, seconds: f64) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let n = (seconds * fs).round() as usize;
    let mut out = vec![0.0; n];
    let voice = Voice {
        f0: rng.random_range(85.0..250.0),
        formant_scale: rng.random_range(0.85..1.2),
        tilt: rng.random_range(0.6..1.1),
    };
    let mut pos = (rng.random_range(0.0..0.15) * fs) as usize;
    while pos < n {
        let level = rng.random_range(0.4..1.0);
        if rng.random_bool(0.5) {
            let len = (rng.random_range(0.02..0.08) * fs) as usize;
            let end = (pos + len).min(n);
            unvoiced(rng, &mut out[pos..end], level * 0.6);
            pos = end;
        }
        let len = (rng.random_range(0.12..0.35) * fs) as usize;
        let end = (pos + len).min(n);
        if end > pos {
            let mut seg = vec![0.0; end - pos];
            voiced(rng, &voice, &mut seg);
            for (o, v) in out[pos..end].iter_mut().zip(seg) {
                *o += level * v;
            }
        }
        pos = end;
        let gap = if rng.random_bool(0.15) {
            rng.random_range(0.15..0.4)
        } else {
            rng.random_range(0.02..0.12)
        };
        pos += (gap * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Writes `clip_NNNN.wav` files (float32) into `dir`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, config: &CorpusConfig, seed: u64) -> Result<Vec<CorpusClip>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clips = Vec::with_capacity(config.n_clips);
    for i in 0..config.n_clips {
        let mut rng = child_rng(seed, i as u64);
        let x = synthesize_clip(&mut rng, config.seconds);
        let id = format!("clip_{i:04}");
        let path = dir.join(format!("{id}.wav"));
        wav_write(&AudioBuffer::mono(x), &path, WavEncoding::Float32)?;
        clips.push(CorpusClip { id, path });
    }
    Ok(clips)
}
