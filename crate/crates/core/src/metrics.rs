//! Scale-invariant signal-to-distortion ratio.

use crate::error::{bail, Result};

/// Reported values are clamped to `±SI_SDR_CLAMP_DB`.
pub const SI_SDR_CLAMP_DB: f64 = 100.0;

/// Lower bound on the reference energy in the projection coefficient.
pub const ENERGY_FLOOR: f64 = 1e-12;

/// Smallest energy passed to the logarithm.
pub(crate) const LOG_FLOOR: f64 = 1e-30;

/// SI-SDR of `est` against `reference` in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        bail!(Shape, "lengths differ: {} vs {}", est.len(), reference.len());
    }
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        bail!(DegenerateSignal, "reference is silent");
    }
    let dot: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
    let alpha = dot / energy.max(ENERGY_FLOOR);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let p = alpha * r;
        num += p * p;
        den += (p - e) * (p - e);
    }
    let db = 10.0 * (num.max(LOG_FLOOR).log10() - den.max(LOG_FLOOR).log10());
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}
