//! Shoebox-room image-source rendering of reference, structured and array
//! microphone channels.

mod dataset;
mod micsep;

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::microstructure::DirectionFilterBank;
use crate::signal::{convolve, sinc_taps, SAMPLE_RATE, SINC_HALF_WIDTH, SPEED_OF_SOUND};

pub use dataset::{
    combinations, generate_mixtures, list_corpus, read_manifest, Manifest, record_seed, write_manifest, CorpusClip,
    MixtureConfig, MixtureRecord, SourceEntry, PRNG_ALGORITHM,
};
pub use micsep::{mic_separation_experiment, MicSepConfig, MicSepResult};

pub type Point = [f64; 3];

/// Rectangular room with one absorption coefficient for all six walls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub dims: Point,
    pub absorption: f64,
    #[serde(default = "default_order")]
    pub max_order: u32,
}

fn default_order() -> u32 {
    3
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(2.0..=20.0).contains(d)) {
            bail!(Argument, "room dims {:?} outside [2, 20] m", self.dims);
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            bail!(Argument, "absorption {} outside (0, 1]", self.absorption);
        }
        if self.max_order > 6 {
            bail!(Argument, "reflection order {} above 6", self.max_order);
        }
        Ok(())
    }

    /// Pressure reflection coefficient of every wall.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption).sqrt()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(&self.dims).all(|(x, d)| *x > 0.0 && x < d)
    }
}

/// Device placement: reference mic, structured mic and optional baseline array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverRig {
    pub ref_mic_pos: Point,
    pub struct_mic_pos: Point,
    /// Room-frame heading of the device's 0° direction, in degrees.
    #[serde(default)]
    pub orientation_deg: f64,
    #[serde(default)]
    pub array_positions: Option<Vec<Point>>,
}

/// Largest allowed reference-to-structured mic spacing.
pub const MAX_RIG_SEPARATION: f64 = 0.02;

impl ReceiverRig {
    pub fn validate(&self, room: &RoomSpec) -> Result<()> {
        let sep = distance(&self.ref_mic_pos, &self.struct_mic_pos);
        if sep > MAX_RIG_SEPARATION + 1e-12 {
            bail!(Argument, "mic separation {sep} m exceeds {MAX_RIG_SEPARATION} m");
        }
        let all = [self.ref_mic_pos, self.struct_mic_pos]
            .into_iter()
            .chain(self.array_positions.iter().flatten().copied());
        for p in all {
            if !room.contains(&p) {
                bail!(Argument, "receiver at {p:?} is outside the room");
            }
        }
        Ok(())
    }

    /// Device-frame azimuth in [0, 360) of `p` seen from `from`.
    pub fn azimuth_from(&self, from: &Point, p: &Point) -> f64 {
        let a = (p[1] - from[1]).atan2(p[0] - from[0]).to_degrees() - self.orientation_deg;
        let a = a.rem_euclid(360.0);
        if a >= 360.0 {
            0.0
        } else {
            a
        }
    }

    /// Device-frame azimuth of `p` at the reference mic.
    pub fn azimuth(&self, p: &Point) -> f64 {
        self.azimuth_from(&self.ref_mic_pos, p)
    }

    /// Room-frame point at device azimuth `angle_deg`, horizontal distance
    /// `dist` from the reference mic and height `z`.
    pub fn point_at(&self, angle_deg: f64, dist: f64, z: f64) -> Point {
        let a = (angle_deg + self.orientation_deg).to_radians();
        [
            self.ref_mic_pos[0] + dist * a.cos(),
            self.ref_mic_pos[1] + dist * a.sin(),
            z,
        ]
    }
}

/// Uniform circular array of `m` mics with the given radius around `center`,
/// first mic on the device 0° axis.
pub fn circular_array(center: Point, radius: f64, m: usize, orientation_deg: f64) -> Vec<Point> {
    (0..m)
        .map(|i| {
            let a = (orientation_deg + 360.0 * i as f64 / m as f64).to_radians();
            [center[0] + radius * a.cos(), center[1] + radius * a.sin(), center[2]]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Interferer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    pub signal_id: String,
    pub position: Point,
    pub role: Role,
    #[serde(default = "unit")]
    pub gain: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub rig: ReceiverRig,
    pub sources: Vec<SceneSource>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        self.rig.validate(&self.room)?;
        for s in &self.sources {
            if !self.room.contains(&s.position) {
                bail!(Argument, "source {} at {:?} is outside the room", s.signal_id, s.position);
            }
        }
        Ok(())
    }
}

/// Mirror source of the image-source lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Point,
    pub gain: f64,
    pub order: u32,
}

/// Enumerates mirror sources with total reflection count `|i|+|j|+|k| <= max_order`.
pub fn image_sources(room: &RoomSpec, src: &Point, max_order: u32) -> Result<Vec<ImageSource>> {
    if !room.contains(src) {
        bail!(Argument, "source {src:?} is outside the room {:?}", room.dims);
    }
    let k = max_order as i64;
    let beta = room.reflection();
    let mirror = |n: i64, x: f64, l: f64| -> f64 {
        if n.rem_euclid(2) == 0 {
            n as f64 * l + x
        } else {
            (n + 1) as f64 * l - x
        }
    };
    let mut out = Vec::new();
    for i in -k..=k {
        for j in -(k - i.abs())..=(k - i.abs()) {
            let rest = k - i.abs() - j.abs();
            for l in -rest..=rest {
                let order = (i.abs() + j.abs() + l.abs()) as u32;
                out.push(ImageSource {
                    position: [
                        mirror(i, src[0], room.dims[0]),
                        mirror(j, src[1], room.dims[1]),
                        mirror(l, src[2], room.dims[2]),
                    ],
                    gain: beta.powi(order as i32),
                    order,
                });
            }
        }
    }
    Ok(out)
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn arrival(img: &ImageSource, mic: &Point) -> (f64, f64) {
    let d = distance(&img.position, mic).max(1e-3);
    (img.gain / (4.0 * PI * d), d / SPEED_OF_SOUND * SAMPLE_RATE as f64)
}

/// Adds `amp * fir` delayed by `delay` (fractional) samples into `out`,
/// growing it as needed. Samples landing before index 0 are dropped.
fn add_delayed(out: &mut Vec<f64>, fir: &[f64], amp: f64, delay: f64) {
    let (first, taps) = sinc_taps(delay);
    let end = first + (taps.len() + fir.len() - 1) as isize;
    if end > out.len() as isize {
        out.resize(end as usize, 0.0);
    }
    for (a, t) in taps.iter().enumerate() {
        if *t == 0.0 {
            continue;
        }
        for (b, h) in fir.iter().enumerate() {
            let idx = first + (a + b) as isize;
            if idx >= 0 {
                out[idx as usize] += amp * t * h;
            }
        }
    }
}

/// Room impulse response between `src` and `mic`.
pub fn render_rir(room: &RoomSpec, src: &Point, mic: &Point, max_order: u32) -> Result<Vec<f64>> {
    let images = image_sources(room, src, max_order)?;
    let mut rir = Vec::new();
    for img in &images {
        let (amp, delay) = arrival(img, mic);
        add_delayed(&mut rir, &[1.0], amp, delay);
    }
    let min_len = SINC_HALF_WIDTH + 1;
    if rir.len() < min_len {
        rir.resize(min_len, 0.0);
    }
    Ok(rir)
}

/// Impulse response seen through the microstructure: each arrival is
/// filtered by the bank entry nearest its device-frame azimuth at the
/// structured mic. The bank's bulk latency is removed.
pub fn render_struct_rir(
    room: &RoomSpec,
    rig: &ReceiverRig,
    src: &Point,
    bank: &DirectionFilterBank,
) -> Result<Vec<f64>> {
    let images = image_sources(room, src, room.max_order)?;
    let mic = rig.struct_mic_pos;
    let latency = bank.latency() as f64;
    let mut rir = Vec::new();
    for img in &images {
        let (amp, delay) = arrival(img, &mic);
        let az = rig.azimuth_from(&mic, &img.position);
        let fir = bank.filter(bank.nearest(az));
        add_delayed(&mut rir, fir, amp, delay - latency);
    }
    if rir.is_empty() {
        rir.push(0.0);
    }
    Ok(rir)
}

/// Channels rendered for one scene; every signal has the scene length.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    pub ref_channel: Vec<f64>,
    pub struct_channel: Vec<f64>,
    pub array_channels: Option<Vec<Vec<f64>>>,
    /// Each source alone at the reference mic, gain applied.
    pub per_source_clean_ref: Vec<Vec<f64>>,
}

fn fit(mut x: Vec<f64>, len: usize) -> Vec<f64> {
    x.resize(len, 0.0);
    x
}

/// One source rendered alone at unit gain on every receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRender {
    pub reference: Vec<f64>,
    pub structured: Vec<f64>,
    pub array: Vec<Vec<f64>>,
}

/// Renders each source separately (source gain applied), all outputs
/// trimmed or padded to the longest signal.
pub fn render_each(
    scene: &SceneSpec,
    bank: &DirectionFilterBank,
    signals: &HashMap<String, Vec<f64>>,
) -> Result<Vec<SourceRender>> {
    scene.validate()?;
    let mut inputs = Vec::with_capacity(scene.sources.len());
    for s in &scene.sources {
        match signals.get(&s.signal_id) {
            Some(x) if !x.is_empty() => inputs.push(x),
            Some(_) => bail!(Size, "signal {} is empty", s.signal_id),
            None => bail!(Lookup, "no signal with id {}", s.signal_id),
        }
    }
    let len = inputs.iter().map(|x| x.len()).max().unwrap_or(0);
    let (rig, room) = (&scene.rig, &scene.room);
    let mut out = Vec::with_capacity(inputs.len());
    for (s, x) in scene.sources.iter().zip(inputs) {
        let x: Vec<f64> = x.iter().map(|v| v * s.gain).collect();
        let reference = fit(convolve(&x, &render_rir(room, &s.position, &rig.ref_mic_pos, room.max_order)?)?, len);
        let structured = fit(convolve(&x, &render_struct_rir(room, rig, &s.position, bank)?)?, len);
        let array = rig
            .array_positions
            .iter()
            .flatten()
            .map(|pos| Ok(fit(convolve(&x, &render_rir(room, &s.position, pos, room.max_order)?)?, len)))
            .collect::<Result<Vec<_>>>()?;
        out.push(SourceRender {
            reference,
            structured,
            array,
        });
    }
    Ok(out)
}

fn add_into(acc: &mut [f64], x: &[f64], gain: f64) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += gain * v;
    }
}

/// Renders all sources; the output length is that of the longest signal.
pub fn render_scene(
    scene: &SceneSpec,
    bank: &DirectionFilterBank,
    signals: &HashMap<String, Vec<f64>>,
) -> Result<SceneRender> {
    let parts = render_each(scene, bank, signals)?;
    let len = parts.first().map_or(0, |p| p.reference.len());
    let n_array = scene.rig.array_positions.as_ref().map_or(0, Vec::len);
    let mut ref_channel = vec![0.0; len];
    let mut struct_channel = vec![0.0; len];
    let mut array = vec![vec![0.0; len]; n_array];
    for p in &parts {
        add_into(&mut ref_channel, &p.reference, 1.0);
        add_into(&mut struct_channel, &p.structured, 1.0);
        for (acc, a) in array.iter_mut().zip(&p.array) {
            add_into(acc, a, 1.0);
        }
    }
    Ok(SceneRender {
        ref_channel,
        struct_channel,
        array_channels: scene.rig.array_positions.as_ref().map(|_| array),
        per_source_clean_ref: parts.into_iter().map(|p| p.reference).collect(),
    })
}

/// Three training rooms followed by one held-out test room.
pub fn preset_rooms() -> Vec<(String, RoomSpec)> {
    let room = |dims: Point, absorption: f64| RoomSpec {
        dims,
        absorption,
        max_order: 3,
    };
    vec![
        ("room_a".into(), room([6.0, 5.0, 3.0], 0.35)),
        ("room_b".into(), room([7.0, 5.5, 3.2], 0.25)),
        ("room_c".into(), room([6.5, 6.0, 2.8], 0.5)),
        ("room_test".into(), room([6.2, 5.2, 3.0], 0.3)),
    ]
}

/// Two device placements that fit every preset room, each carrying a
/// 4-mic, 5 cm circular array centered on the reference mic.
pub fn preset_rigs() -> Vec<(String, ReceiverRig)> {
    let rig = |ref_mic: Point, offset: Point| ReceiverRig {
        ref_mic_pos: ref_mic,
        struct_mic_pos: [ref_mic[0] + offset[0], ref_mic[1] + offset[1], ref_mic[2] + offset[2]],
        orientation_deg: 0.0,
        array_positions: Some(circular_array(ref_mic, 0.05, 4, 0.0)),
    };
    vec![
        ("rig_0".into(), rig([3.0, 1.0, 1.2], [0.01, 0.0, 0.0])),
        ("rig_1".into(), rig([3.1, 1.2, 1.1], [0.0, 0.01, 0.0])),
    ]
}

/// 1-based sector of a device-frame azimuth in [0, 180).
pub fn sector_of(angle_deg: f64, n_sectors: usize) -> Result<usize> {
    if !(0.0..180.0).contains(&angle_deg) {
        bail!(Argument, "angle {angle_deg} outside [0, 180); fold it first");
    }
    if n_sectors == 0 {
        bail!(Argument, "zero sectors");
    }
    let width = 180.0 / n_sectors as f64;
    Ok(((angle_deg / width).floor() as usize + 1).min(n_sectors))
}
