use std::f64::consts::PI;

#[cfg(test)]
use num_complex::Complex64;
use realfft::RealFftPlanner;

use crate::error::{bail, Result};

/// Half width of the fractional-delay interpolator; the kernel has
/// `2 * SINC_HALF_WIDTH + 1` taps.
pub const SINC_HALF_WIDTH: usize = 15;

const DIRECT_CONV_LIMIT: usize = 1 << 15;

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn convolve_direct(signal: &[f64], fir: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; signal.len() + fir.len() - 1];
    for (i, &s) in signal.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (j, &h) in fir.iter().enumerate() {
            out[i + j] += s * h;
        }
    }
    out
}

/// Full linear convolution, `len(signal) + len(fir) - 1` samples.
///
/// Small products use the direct form; larger ones go through a real FFT.
pub fn convolve(signal: &[f64], fir: &[f64]) -> Result<Vec<f64>> {
    if signal.is_empty() || fir.is_empty() {
        bail!(Size, "convolution needs non-empty inputs");
    }
    if signal.len().min(fir.len()) <= 64 || signal.len() * fir.len() <= DIRECT_CONV_LIMIT {
        return Ok(convolve_direct(signal, fir));
    }
    let out_len = signal.len() + fir.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a = vec![0.0; n];
    a[..signal.len()].copy_from_slice(signal);
    let mut b = vec![0.0; n];
    b[..fir.len()].copy_from_slice(fir);
    let mut fa = fwd.make_output_vec();
    let mut fb = fwd.make_output_vec();
    fwd.process(&mut a, &mut fa).expect("sized by plan");
    fwd.process(&mut b, &mut fb).expect("sized by plan");
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fa[0].im = 0.0;
    let last = fa.len() - 1;
    fa[last].im = 0.0;
    inv.process(&mut fa, &mut a).expect("sized by plan");
    let norm = 1.0 / n as f64;
    Ok(a[..out_len].iter().map(|v| v * norm).collect())
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Interpolation taps for a delay of `delay` samples: returns the index of
/// the first tap and the 31 Hann-windowed sinc values. Integer delays give a
/// single unit tap.
pub fn sinc_taps(delay: f64) -> (isize, Vec<f64>) {
    let base = delay.floor();
    let frac = delay - base;
    let first = base as isize - SINC_HALF_WIDTH as isize;
    if frac == 0.0 {
        let mut taps = vec![0.0; 2 * SINC_HALF_WIDTH + 1];
        taps[SINC_HALF_WIDTH] = 1.0;
        return (first, taps);
    }
    let half = (SINC_HALF_WIDTH + 1) as f64;
    let taps = (0..=2 * SINC_HALF_WIDTH)
        .map(|i| {
            let d = i as f64 - SINC_HALF_WIDTH as f64 - frac;
            let w = 0.5 * (1.0 + (PI * d / half).cos());
            sinc(d) * w
        })
        .collect();
    (first, taps)
}

/// Delays `signal` by a possibly fractional number of samples. The output
/// has `len + ceil(delay)` samples; interpolator tails beyond that are cut.
pub fn fractional_delay(signal: &[f64], delay_samples: f64) -> Result<Vec<f64>> {
    if !(delay_samples >= 0.0) || !delay_samples.is_finite() {
        bail!(Argument, "delay must be finite and >= 0, got {delay_samples}");
    }
    let out_len = signal.len() + delay_samples.ceil() as usize;
    let mut out = vec![0.0; out_len];
    let (first, taps) = sinc_taps(delay_samples);
    for (i, &x) in signal.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (k, &h) in taps.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let idx = i as isize + first + k as isize;
            if idx >= 0 && (idx as usize) < out_len {
                out[idx as usize] += x * h;
            }
        }
    }
    Ok(out)
}

/// Gain for `interferer` so that `20 log10(rms(target) / (gain * rms(interferer))) == snr_db`.
pub fn scale_to_snr(target: &[f64], interferer: &[f64], snr_db: f64) -> Result<f64> {
    let rt = rms(target);
    let ri = rms(interferer);
    if ri == 0.0 {
        bail!(DegenerateSignal, "interferer is silent");
    }
    if rt == 0.0 {
        bail!(DegenerateSignal, "target is silent");
    }
    Ok(rt / (ri * 10f64.powf(snr_db / 20.0)))
}

/// Phase of `x` at frequency `f` (normalized, cycles/sample) by least squares
/// fit of a sinusoid over the given samples.
#[cfg(test)]
pub(crate) fn tone_phase_amp(x: &[f64], f: f64, start: usize) -> (f64, f64) {
    let z: Complex64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| Complex64::from_polar(*v, -2.0 * PI * f * (i + start) as f64))
        .sum::<Complex64>()
        * (2.0 / x.len() as f64);
    (z.arg(), z.norm())
}
