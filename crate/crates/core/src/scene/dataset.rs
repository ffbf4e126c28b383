//! Sector-labelled mixture dataset generation and the JSON-lines manifest.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{render_each, sector_of, ReceiverRig, Role, RoomSpec, SceneSource, SceneSpec};
use crate::error::{bail, Error, Result};
use crate::microstructure::DirectionFilterBank;
use crate::rng::{child_rng, derive_seed};
use crate::signal::{scale_to_snr, wav_read, wav_write, AudioBuffer, WavEncoding, SAMPLE_RATE};

pub use crate::rng::PRNG_ALGORITHM;

/// Shortest accepted corpus clip, in seconds.
pub const MIN_CLIP_SECONDS: f64 = 3.0;
/// Clips are peak-normalized to this level before placement.
pub const CLIP_PEAK: f64 = 0.5;
/// Mixtures whose peak exceeds this are scaled down as a whole.
const MIX_PEAK_LIMIT: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusClip {
    pub id: String,
    pub path: PathBuf,
}

/// Mono WAV files of a directory, sorted by file name; ids are file stems.
pub fn list_corpus(dir: impl AsRef<Path>) -> Result<Vec<CorpusClip>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut clips = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            clips.push(CorpusClip { id, path });
        }
    }
    clips.sort_by(|a, b| a.id.cmp(&b.id));
    if clips.is_empty() {
        bail!(Resource, "no WAV clips in {}", dir.display());
    }
    Ok(clips)
}

fn load_clip(clip: &CorpusClip) -> Result<Vec<f64>> {
    let buf = wav_read(&clip.path)?;
    if buf.num_channels() != 1 {
        bail!(Unsupported, "corpus clip {} has {} channels", clip.id, buf.num_channels());
    }
    let x = buf.into_channels().remove(0);
    if (x.len() as f64) < MIN_CLIP_SECONDS * SAMPLE_RATE as f64 {
        bail!(Argument, "corpus clip {} is shorter than {MIN_CLIP_SECONDS} s", clip.id);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        bail!(DegenerateSignal, "corpus clip {} is silent", clip.id);
    }
    Ok(x.into_iter().map(|v| v * CLIP_PEAK / peak).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub n_sectors: usize,
    pub max_targets: usize,
    #[serde(default = "default_snr")]
    pub snr_range_db: (f64, f64),
    pub clips_per_combo: usize,
    /// Inclusive range of interferer counts per mixture.
    #[serde(default = "default_interferers")]
    pub interferers: (usize, usize),
    #[serde(default = "default_distance")]
    pub distance_range_m: (f64, f64),
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    /// Leading interferer-only segment; targets start after it.
    #[serde(default = "default_head")]
    pub noise_head_s: f64,
    /// Probability that a record carries no target source.
    #[serde(default = "default_empty_rate")]
    pub empty_target_rate: f64,
}

fn default_snr() -> (f64, f64) {
    (-5.0, 5.0)
}
fn default_interferers() -> (usize, usize) {
    (1, 2)
}
fn default_distance() -> (f64, f64) {
    (0.5, 2.5)
}
fn default_duration() -> f64 {
    3.0
}
fn default_head() -> f64 {
    0.5
}
fn default_empty_rate() -> f64 {
    0.1
}

impl MixtureConfig {
    pub fn new(n_sectors: usize, max_targets: usize, clips_per_combo: usize) -> Self {
        Self {
            n_sectors,
            max_targets,
            snr_range_db: default_snr(),
            clips_per_combo,
            interferers: default_interferers(),
            distance_range_m: default_distance(),
            duration_s: default_duration(),
            noise_head_s: default_head(),
            empty_target_rate: default_empty_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if !matches!(self.n_sectors, 6 | 9) {
            return Err(cfg("n_sectors", format!("{} is not 6 or 9", self.n_sectors)));
        }
        if !(1..=3).contains(&self.max_targets) {
            return Err(cfg("max_targets", format!("{} outside 1..=3", self.max_targets)));
        }
        if self.clips_per_combo == 0 {
            return Err(cfg("clips_per_combo", "must be positive".into()));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi) {
            return Err(cfg("snr_range_db", format!("empty range ({lo}, {hi})")));
        }
        let (a, b) = self.interferers;
        if a == 0 || a > b {
            return Err(cfg("interferers", format!("invalid range ({a}, {b})")));
        }
        let (dlo, dhi) = self.distance_range_m;
        if !(dlo > 0.0 && dlo <= dhi) {
            return Err(cfg("distance_range_m", format!("invalid range ({dlo}, {dhi})")));
        }
        if !(self.noise_head_s >= 0.0 && self.duration_s > self.noise_head_s) {
            return Err(cfg("duration_s", "must exceed noise_head_s".into()));
        }
        if self.duration_s > MIN_CLIP_SECONDS {
            return Err(cfg("duration_s", format!("longer than the {MIN_CLIP_SECONDS} s clip minimum")));
        }
        if !(0.0..=1.0).contains(&self.empty_target_rate) {
            return Err(cfg("empty_target_rate", "outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn head_samples(&self) -> usize {
        (self.noise_head_s * SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub angle_deg: f64,
    pub sector: usize,
    /// Interferers: level of the target sum over this source at the
    /// reference mic. Targets are the 0 dB reference. In target-free
    /// records levels are relative to the first interferer.
    pub snr_db: f64,
    pub signal_id: String,
    pub role: Role,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub mixture_wav_path: String,
    pub array_wav_path: Option<String>,
    pub target_wav_path: String,
    pub n_sectors: usize,
    /// Bit `i - 1` set when sector `i` is selected.
    pub selected_sectors: u32,
    pub per_source: Vec<SourceEntry>,
    pub room_id: String,
    pub rig_id: String,
    pub seed: u64,
    pub prng: String,
    /// Samples at the start that hold no target signal.
    pub noise_head_samples: usize,
}

impl MixtureRecord {
    pub fn target_present(&self) -> bool {
        self.per_source.iter().any(|s| s.role == Role::Target)
    }

    /// Checks the sector-label invariants.
    pub fn validate(&self) -> Result<()> {
        let mask_limit = 1u32 << self.n_sectors;
        if self.selected_sectors == 0 || self.selected_sectors >= mask_limit {
            bail!(Format, "record {}: selection {:#b} invalid", self.id, self.selected_sectors);
        }
        for s in &self.per_source {
            let inside = self.selected_sectors & (1 << (s.sector - 1)) != 0;
            let ok = match s.role {
                Role::Target => inside,
                Role::Interferer => !inside,
            };
            if !ok || s.sector == 0 || s.sector > self.n_sectors {
                bail!(Format, "record {}: source {} in sector {} breaks labels", self.id, s.signal_id, s.sector);
            }
        }
        Ok(())
    }
}

/// All `k`-subsets of `n` sectors as bitmasks, in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<u32> {
    fn rec(start: usize, n: usize, k: usize, mask: u32, out: &mut Vec<u32>) {
        if k == 0 {
            out.push(mask);
            return;
        }
        for i in start..=n - k {
            rec(i + 1, n, k - 1, mask | (1 << i), out);
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, 0, &mut out);
    }
    out
}

/// Seed of record `index` under manifest seed `seed`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, index)
}

/// Farthest horizontal distance along device azimuth `angle` that keeps a
/// point `margin` inside the room.
fn reach(room: &RoomSpec, rig: &ReceiverRig, angle: f64, margin: f64) -> f64 {
    let a = (angle + rig.orientation_deg).to_radians();
    let (dx, dy) = (a.cos(), a.sin());
    let p = rig.ref_mic_pos;
    let mut t = f64::INFINITY;
    for (d, x, l) in [(dx, p[0], room.dims[0]), (dy, p[1], room.dims[1])] {
        if d > 1e-12 {
            t = t.min((l - margin - x) / d);
        } else if d < -1e-12 {
            t = t.min((x - margin) / -d);
        }
    }
    t
}

const WALL_MARGIN: f64 = 0.1;

struct Placement {
    angle: f64,
    sector: usize,
    distance: f64,
}

fn place(
    rng: &mut crate::rng::Rng,
    room: &RoomSpec,
    rig: &ReceiverRig,
    sector: usize,
    n_sectors: usize,
    dist: (f64, f64),
) -> Result<Placement> {
    let width = 180.0 / n_sectors as f64;
    let lo = (sector - 1) as f64 * width;
    let mut angle = rng.random_range(lo..lo + width);
    // Guard the half-open boundary against rounding.
    if sector_of(angle, n_sectors)? != sector {
        angle = lo;
    }
    let far = dist.1.min(reach(room, rig, angle, WALL_MARGIN));
    if far < dist.0 {
        bail!(
            Argument,
            "rig leaves only {far:.2} m at {angle:.1}° in a {:?} room; need {}",
            room.dims,
            dist.0
        );
    }
    let distance = if far > dist.0 { rng.random_range(dist.0..far) } else { far };
    Ok(Placement {
        angle,
        sector,
        distance,
    })
}

fn write_buffer(dir: &Path, rel: &str, channels: Vec<Vec<f64>>) -> Result<()> {
    wav_write(&AudioBuffer::new(channels)?, dir.join(rel), WavEncoding::Float32)
}

/// Renders every combination of selected sectors (1..=max_targets targets)
/// in every room and rig, writing audio under `out_dir/audio` and
/// returning the records (also written as `out_dir/manifest.jsonl`).
pub fn generate_mixtures(
    corpus: &[CorpusClip],
    rooms: &[(String, RoomSpec)],
    rigs: &[(String, ReceiverRig)],
    config: &MixtureConfig,
    bank: &DirectionFilterBank,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<MixtureRecord>> {
    config.validate()?;
    if rooms.is_empty() || rigs.is_empty() {
        bail!(Argument, "need at least one room and one rig");
    }
    for (_, room) in rooms {
        room.validate()?;
        for (_, rig) in rigs {
            rig.validate(room)?;
        }
    }
    let out_dir = out_dir.as_ref();
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    if corpus.is_empty() {
        bail!(Resource, "empty corpus");
    }
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let n = config.samples();
    let head = config.head_samples();
    let mut records = Vec::new();
    let mut index = 0u64;
    for k in 1..=config.max_targets {
        for mask in combinations(config.n_sectors, k) {
            for (room_id, room) in rooms {
                for (rig_id, rig) in rigs {
                    for _ in 0..config.clips_per_combo {
                        let rec = generate_one(
                            corpus, &mut cache, room_id, room, rig_id, rig, config, bank, mask, seed, index, n,
                            head, out_dir,
                        )?;
                        records.push(rec);
                        index += 1;
                    }
                }
            }
        }
    }
    write_manifest(out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn generate_one(
    corpus: &[CorpusClip],
    cache: &mut HashMap<usize, Vec<f64>>,
    room_id: &str,
    room: &RoomSpec,
    rig_id: &str,
    rig: &ReceiverRig,
    config: &MixtureConfig,
    bank: &DirectionFilterBank,
    mask: u32,
    seed: u64,
    index: u64,
    n: usize,
    head: usize,
    out_dir: &Path,
) -> Result<MixtureRecord> {
    let rseed = record_seed(seed, index);
    let mut rng = child_rng(seed, index);
    let ns = config.n_sectors;
    let empty = config.empty_target_rate > 0.0 && rng.random_bool(config.empty_target_rate);
    let (ilo, ihi) = config.interferers;
    let n_int = rng.random_range(ilo..=ihi);
    let selected: Vec<usize> = (1..=ns).filter(|s| mask & (1 << (s - 1)) != 0).collect();
    let free: Vec<usize> = (1..=ns).filter(|s| mask & (1 << (s - 1)) == 0).collect();
    let target_sectors: Vec<usize> = if empty { Vec::new() } else { selected.clone() };
    let slots = target_sectors.len() + n_int;
    if corpus.len() < slots {
        bail!(Resource, "corpus of {} clips exhausted by a {slots}-source mixture", corpus.len());
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);

    let mut sources = Vec::with_capacity(slots);
    let mut signals = HashMap::new();
    let mut entries = Vec::with_capacity(slots);
    for slot in 0..slots {
        let is_target = slot < target_sectors.len();
        let sector = if is_target {
            target_sectors[slot]
        } else {
            free[rng.random_range(0..free.len())]
        };
        let p = place(&mut rng, room, rig, sector, ns, config.distance_range_m)?;
        let clip_idx = order[slot];
        if !cache.contains_key(&clip_idx) {
            cache.insert(clip_idx, load_clip(&corpus[clip_idx])?);
        }
        let clip = &cache[&clip_idx];
        let seg = if is_target { n - head } else { n };
        let offset = rng.random_range(0..=clip.len().saturating_sub(seg));
        let mut sig = vec![0.0; if is_target { head } else { 0 }];
        sig.extend_from_slice(&clip[offset..(offset + seg).min(clip.len())]);
        sig.resize(n, 0.0);
        let z = rig.ref_mic_pos[2];
        let role = if is_target { Role::Target } else { Role::Interferer };
        let key = format!("{slot}:{}", corpus[clip_idx].id);
        sources.push(SceneSource {
            signal_id: key.clone(),
            position: rig.point_at(p.angle, p.distance, z),
            role,
            gain: 1.0,
        });
        signals.insert(key, sig);
        entries.push(SourceEntry {
            angle_deg: p.angle,
            sector: p.sector,
            snr_db: 0.0,
            signal_id: corpus[clip_idx].id.clone(),
            role,
            distance_m: p.distance,
        });
    }
    let scene = SceneSpec {
        room: room.clone(),
        rig: rig.clone(),
        sources,
        seed: rseed,
    };
    let parts = render_each(&scene, bank, &signals)?;

    let n_targets = target_sectors.len();
    let mut target = vec![0.0; n];
    for p in &parts[..n_targets] {
        for (a, v) in target.iter_mut().zip(&p.reference) {
            *a += v;
        }
    }
    let reference = if n_targets > 0 { target.clone() } else { parts[0].reference.clone() };
    let (slo, shi) = config.snr_range_db;
    let mut gains = vec![1.0; slots];
    for i in n_targets..slots {
        let snr = if n_targets == 0 && i == 0 {
            0.0
        } else if slo < shi {
            rng.random_range(slo..shi)
        } else {
            slo
        };
        gains[i] = scale_to_snr(&reference, &parts[i].reference, snr)?;
        entries[i].snr_db = snr;
    }

    let n_array = rig.array_positions.as_ref().map_or(0, Vec::len);
    let mut mix = vec![vec![0.0; n]; 2];
    let mut array = vec![vec![0.0; n]; n_array];
    for (p, g) in parts.iter().zip(&gains) {
        for t in 0..n {
            mix[0][t] += g * p.reference[t];
            mix[1][t] += g * p.structured[t];
        }
        for (acc, a) in array.iter_mut().zip(&p.array) {
            for t in 0..n {
                acc[t] += g * a[t];
            }
        }
    }
    let peak = mix.iter().chain(&array).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > MIX_PEAK_LIMIT {
        let k = MIX_PEAK_LIMIT / peak;
        for v in mix.iter_mut().chain(array.iter_mut()).flatten().chain(target.iter_mut()) {
            *v *= k;
        }
    }

    let id = format!("r{index:06}");
    let mixture_wav_path = format!("audio/{id}_mix.wav");
    let target_wav_path = format!("audio/{id}_target.wav");
    write_buffer(out_dir, &mixture_wav_path, mix)?;
    write_buffer(out_dir, &target_wav_path, vec![target])?;
    let array_wav_path = if n_array > 0 {
        let p = format!("audio/{id}_array.wav");
        write_buffer(out_dir, &p, array)?;
        Some(p)
    } else {
        None
    };
    let rec = MixtureRecord {
        id,
        mixture_wav_path,
        array_wav_path,
        target_wav_path,
        n_sectors: ns,
        selected_sectors: mask,
        per_source: entries,
        room_id: room_id.to_string(),
        rig_id: rig_id.to_string(),
        seed: rseed,
        prng: PRNG_ALGORITHM.to_string(),
        noise_head_samples: head,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[MixtureRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<MixtureRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MixtureRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Records plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<MixtureRecord>,
}

impl Manifest {
    /// Reads a JSON-lines manifest; paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records: read_manifest(path)?,
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Two-channel (reference, structured) mixture of a record.
    pub fn mixture(&self, rec: &MixtureRecord) -> Result<AudioBuffer> {
        let buf = wav_read(self.resolve(&rec.mixture_wav_path))?;
        if buf.num_channels() != 2 {
            bail!(Format, "record {} mixture has {} channels", rec.id, buf.num_channels());
        }
        Ok(buf)
    }

    pub fn target(&self, rec: &MixtureRecord) -> Result<Vec<f64>> {
        let buf = wav_read(self.resolve(&rec.target_wav_path))?;
        Ok(buf.into_channels().remove(0))
    }

    pub fn array(&self, rec: &MixtureRecord) -> Result<AudioBuffer> {
        match &rec.array_wav_path {
            Some(p) => wav_read(self.resolve(p)),
            None => bail!(Lookup, "record {} has no array recording", rec.id),
        }
    }
}
