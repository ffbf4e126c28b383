//! Ratio variability of two plain microphones versus their spacing.

use std::io::Write;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{render_rir, Point, RoomSpec};
use crate::error::{bail, Error, Result};
use crate::features::signal_ratio;
use crate::rng::{child_rng, rng_from};
use crate::signal::{convolve, FrameSpec, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicSepConfig {
    #[serde(default = "default_distances")]
    pub distances_m: Vec<f64>,
    pub rooms: Vec<RoomSpec>,
    pub n_placements: usize,
    #[serde(default = "default_signal_s")]
    pub signal_s: f64,
    #[serde(default = "default_band")]
    pub band_hz: (f64, f64),
}

fn default_distances() -> Vec<f64> {
    vec![0.01, 0.08, 0.16]
}
fn default_signal_s() -> f64 {
    1.0
}
fn default_band() -> (f64, f64) {
    (1000.0, 8000.0)
}

impl MicSepConfig {
    pub fn new(rooms: Vec<RoomSpec>, n_placements: usize) -> Self {
        Self {
            distances_m: default_distances(),
            rooms,
            n_placements,
            signal_s: default_signal_s(),
            band_hz: default_band(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicSepResult {
    pub freqs_hz: Vec<f64>,
    pub distances_m: Vec<f64>,
    /// `std_db[distance][bin]`: spread across placements of the ratio level.
    pub std_db: Vec<Vec<f64>>,
    /// Mean of each curve over the configured band.
    pub band_mean_db: Vec<f64>,
}

impl MicSepResult {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("distance_m,freq_hz,std_db\n");
        for (d, curve) in self.distances_m.iter().zip(&self.std_db) {
            for (f, v) in self.freqs_hz.iter().zip(curve) {
                out.push_str(&format!("{d},{f},{v}\n"));
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Per-bin level of `x / x_ref` in dB.
pub fn ratio_db(x: &[f64], x_ref: &[f64], spec: &FrameSpec) -> Result<Vec<f64>> {
    Ok(signal_ratio(x, x_ref, spec)?
        .into_iter()
        .map(|r| 20.0 * r.norm().max(1e-12).log10())
        .collect())
}

/// Population standard deviation across rows, per column.
pub fn spread_per_bin(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let bins = rows.first().map_or(0, Vec::len);
    (0..bins)
        .map(|f| {
            if rows.iter().all(|r| r[f] == rows[0][f]) {
                return 0.0;
            }
            let m = rows.iter().map(|r| r[f]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[f] - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn inside(room: &RoomSpec, p: &Point, margin: f64) -> bool {
    p.iter().zip(&room.dims).all(|(x, d)| *x > margin && *x < d - margin)
}

/// For each spacing, renders a noise source into two plain mics over
/// random placements and reports the per-frequency spread of their
/// level ratio.
pub fn mic_separation_experiment(config: &MicSepConfig, seed: u64) -> Result<MicSepResult> {
    if config.rooms.is_empty() || config.n_placements == 0 || config.distances_m.is_empty() {
        bail!(Argument, "need rooms, placements and distances");
    }
    for room in &config.rooms {
        room.validate()?;
    }
    let spec = FrameSpec::default();
    let len = (config.signal_s * SAMPLE_RATE as f64).round() as usize;
    let mut noise_rng = rng_from(seed);
    let signal: Vec<f64> = (0..len).map(|_| noise_rng.random_range(-0.5..0.5)).collect();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); config.distances_m.len()];
    let dmax = config.distances_m.iter().fold(0.0f64, |m, d| m.max(*d));
    for p in 0..config.n_placements {
        let room = &config.rooms[p % config.rooms.len()];
        let mut rng = child_rng(seed, p as u64 + 1);
        let margin = 0.3 + dmax;
        let (mic, phi, src) = loop {
            let mic = [
                rng.random_range(margin..room.dims[0] - margin),
                rng.random_range(margin..room.dims[1] - margin),
                rng.random_range(0.8..1.5f64.min(room.dims[2] - 0.3)),
            ];
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(0.5..2.5);
            let src = [mic[0] + d * a.cos(), mic[1] + d * a.sin(), mic[2]];
            if inside(room, &src, 0.2) {
                break (mic, phi, src);
            }
        };
        let x_ref = convolve(&signal, &render_rir(room, &src, &mic, room.max_order)?)?;
        for (k, d) in config.distances_m.iter().enumerate() {
            let other = [mic[0] + d * phi.cos(), mic[1] + d * phi.sin(), mic[2]];
            let x = convolve(&signal, &render_rir(room, &src, &other, room.max_order)?)?;
            let n = x.len().min(x_ref.len());
            rows[k].push(ratio_db(&x[..n], &x_ref[..n], &spec)?);
        }
    }
    let freqs: Vec<f64> = (0..spec.bins())
        .map(|k| k as f64 * SAMPLE_RATE as f64 / spec.window_len() as f64)
        .collect();
    let std_db: Vec<Vec<f64>> = rows.iter().map(|r| spread_per_bin(r)).collect();
    let (lo, hi) = config.band_hz;
    let band: Vec<usize> = (0..freqs.len()).filter(|&k| freqs[k] >= lo && freqs[k] <= hi).collect();
    let band_mean_db = std_db
        .iter()
        .map(|c| band.iter().map(|&k| c[k]).sum::<f64>() / band.len().max(1) as f64)
        .collect();
    Ok(MicSepResult {
        freqs_hz: freqs,
        distances_m: config.distances_m.clone(),
        std_db,
        band_mean_db,
    })
}
