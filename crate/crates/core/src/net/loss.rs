use crate::metrics::ENERGY_FLOOR;
use crate::autodiff::{Tensor, Var};
use crate::error::{bail, Result};

pub use crate::metrics::SI_SDR_CLAMP_DB;

/// Default weight of the L1 branch used when no target is present.
pub const L1_WEIGHT: f64 = 50.0;

/// Training loss for one estimate.
///
/// With a target present this is the negative SI-SDR in dB, clamped to
/// `±SI_SDR_CLAMP_DB`. Without one it is `l1_weight` times the mean
/// absolute error, pulling the output toward silence.
pub fn si_sdr_loss<'t>(est: Var<'t>, target: &[f64], target_present: bool, l1_weight: f64) -> Result<Var<'t>> {
    if est.shape() != [target.len()] {
        bail!(Shape, "estimate {:?} vs target of {} samples", est.shape(), target.len());
    }
    let tape = est.tape();
    let s = tape.constant(Tensor::new(&[target.len()], target.to_vec())?);
    if !target_present {
        return Ok(est.sub(s)?.abs().mean().scale(l1_weight));
    }
    let energy: f64 = target.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        bail!(DegenerateSignal, "target marked present but silent");
    }
    let alpha = est.mul(s)?.sum().scale(1.0 / energy.max(ENERGY_FLOOR));
    let proj = s.mul(alpha)?;
    let num = proj.square().sum();
    let den = proj.sub(est)?.square().sum();
    Ok(num
        .log10()
        .sub(den.log10())?
        .scale(-10.0)
        .clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}
