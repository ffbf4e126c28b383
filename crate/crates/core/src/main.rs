use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dirsep::baselines::{beamform, ArrayGeometry, Beamformer};
use dirsep::config::parse_json;
use dirsep::corpus::{write_synthetic_corpus, CorpusConfig};
use dirsep::eval::{require_models, score_system, EvalReport, Processor, System};
use dirsep::features::{fit_norm_stats, NormStats};
use dirsep::microstructure::{band_grid, design_sweep, spatial_diversity, DirectionFilterBank, MicrostructureSpec};
use dirsep::net::{train, AngleQuery, Checkpoint, NetConfig, Streamer, TrainConfig};
use dirsep::rng::{derive_seed, PRNG_ALGORITHM};
use dirsep::scene::{
    generate_mixtures, list_corpus, mic_separation_experiment, preset_rigs, preset_rooms, render_scene, Manifest,
    MicSepConfig, MixtureConfig, ReceiverRig, RoomSpec, SceneSpec,
};
use dirsep::signal::{wav_read, wav_write, AudioBuffer, FrameSpec, WavEncoding, SAMPLE_RATE};
use dirsep::{Error, Result};

#[derive(Parser)]
#[command(name = "dirsep", version, about = "Directional speech extraction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the sector count of the config or checks it against a checkpoint.
    #[arg(long)]
    n_sectors: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Rank microstructure designs by spatial diversity.
    Design(Common),
    /// Render one scene to the reference, structured and array mics.
    Simulate(Common),
    /// Generate a mixture dataset and its manifest.
    GenData(Common),
    /// Fit per-frequency feature normalization on a manifest.
    FitStats(Common),
    /// Train the extraction network.
    Train(Common),
    /// Offline extraction of a two-channel recording.
    Infer(Common),
    /// Chunked streaming extraction with per-chunk timing.
    Stream(Common),
    /// Delay-and-sum or MVDR on an array recording.
    Baseline(Common),
    /// Score systems on a manifest.
    Eval(Common),
    /// Inter-mic transfer-ratio variation versus mic spacing.
    MicSep(Common),
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    n_sectors: Option<usize>,
    prng_algorithm: &'a str,
    artifact_version: &'a str,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let bytes = std::fs::read(path).map_err(|e| config_error(".", format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| config_error(".", "config is not UTF-8"))?;
    let digest = Sha256::digest(&bytes);
    let hash = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((parse_json(text)?, hash))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_sectors(field: &str, have: usize) -> Result<()> {
    if matches!(have, 6 | 9) {
        Ok(())
    } else {
        Err(config_error(field, format!("{have} is not 6 or 9")))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RoomRef {
    Preset(String),
    Spec(RoomSpec),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RigRef {
    Preset(String),
    Spec(ReceiverRig),
}

fn rooms_from(field: &str, refs: Option<Vec<RoomRef>>, default: &[&str]) -> Result<Vec<(String, RoomSpec)>> {
    let presets: BTreeMap<String, RoomSpec> = preset_rooms().into_iter().collect();
    let refs = refs.unwrap_or_else(|| default.iter().map(|s| RoomRef::Preset(s.to_string())).collect());
    refs.into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            RoomRef::Preset(name) => presets
                .get(&name)
                .cloned()
                .map(|room| (name.clone(), room))
                .ok_or_else(|| config_error(&format!("{field}[{i}]"), format!("unknown preset room {name}"))),
            RoomRef::Spec(spec) => Ok((format!("room_{i}"), spec)),
        })
        .collect()
}

fn rig_presets() -> BTreeMap<String, ReceiverRig> {
    preset_rigs().into_iter().collect()
}

fn rigs_from(field: &str, refs: Option<Vec<RigRef>>) -> Result<Vec<(String, ReceiverRig)>> {
    let Some(refs) = refs else {
        return Ok(preset_rigs());
    };
    let presets = rig_presets();
    refs.into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            RigRef::Preset(name) => presets
                .get(&name)
                .cloned()
                .map(|rig| (name.clone(), rig))
                .ok_or_else(|| config_error(&format!("{field}[{i}]"), format!("unknown preset rig {name}"))),
            RigRef::Spec(rig) => Ok((format!("rig_{i}"), rig)),
        })
        .collect()
}

#[derive(Deserialize, Clone, Copy, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
enum BankKind {
    #[default]
    Default,
    Flat,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BankRef {
    Kind(BankKind),
    Spec(MicrostructureSpec),
}

impl Default for BankRef {
    fn default() -> Self {
        BankRef::Kind(BankKind::Default)
    }
}

impl BankRef {
    fn spec(self) -> MicrostructureSpec {
        match self {
            BankRef::Kind(BankKind::Default) => MicrostructureSpec::default(),
            BankRef::Kind(BankKind::Flat) => MicrostructureSpec::flat(MicrostructureSpec::default().wall_leakage_db),
            BankRef::Spec(s) => s,
        }
    }

    fn bank(self, field: &str) -> Result<DirectionFilterBank> {
        let spec = self.spec();
        spec.validate().map_err(|e| config_error(field, e.to_string()))?;
        DirectionFilterBank::from_spec(&spec)
    }
}

// ---- design ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignConfig {
    /// Named designs; defaults to the standard cylinder, a 10 mm variant and the flat bank.
    #[serde(default)]
    designs: Option<Vec<(String, MicrostructureSpec)>>,
    #[serde(default = "design_band")]
    band_hz: (f64, f64),
}

fn design_band() -> (f64, f64) {
    (1000.0, 4000.0)
}

fn run_design(c: &Common) -> Result<String> {
    let (cfg, hash): (DesignConfig, _) = load_config(&c.config)?;
    let (lo, hi) = cfg.band_hz;
    if !(lo > 0.0 && lo < hi && hi < SAMPLE_RATE as f64 / 2.0) {
        return Err(config_error("band_hz", format!("invalid band ({lo}, {hi})")));
    }
    let designs = cfg.designs.unwrap_or_else(|| {
        let base = MicrostructureSpec::default();
        vec![
            ("default_20mm".into(), base.clone()),
            ("scaled_10mm".into(), base.scaled(0.01)),
            ("flat".into(), MicrostructureSpec::flat(base.wall_leakage_db)),
        ]
    });
    for (i, (_, spec)) in designs.iter().enumerate() {
        spec.validate().map_err(|e| config_error(&format!("designs[{i}][1]"), e.to_string()))?;
    }
    let ranking = design_sweep(&designs, cfg.band_hz)?;
    write_json(&c.out.join("ranking.json"), &ranking)?;
    let grid = band_grid(lo, hi);
    let mut csv = String::from("freq_hz");
    let mut curves = Vec::new();
    for (name, spec) in &designs {
        csv.push(',');
        csv.push_str(name);
        curves.push(spatial_diversity(&DirectionFilterBank::from_spec(spec)?, &grid));
    }
    csv.push('\n');
    for (k, f) in grid.iter().enumerate() {
        csv.push_str(&f.to_string());
        for c in &curves {
            csv.push_str(&format!(",{}", c[k]));
        }
        csv.push('\n');
    }
    write_text(&c.out.join("diversity.csv"), &csv)?;
    for r in &ranking {
        println!("{:<16} diversity {:.6}  pairwise {:.4}", r.name, r.mean_diversity, r.mean_pairwise_distance);
    }
    Ok(hash)
}

// ---- simulate ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    scene: SceneSpec,
    /// Signal id to mono WAV path.
    signals: BTreeMap<String, PathBuf>,
    #[serde(default)]
    microstructure: BankRef,
}

fn run_simulate(c: &Common) -> Result<String> {
    let (cfg, hash): (SimulateConfig, _) = load_config(&c.config)?;
    cfg.scene.validate().map_err(|e| config_error("scene", e.to_string()))?;
    let bank = cfg.microstructure.bank("microstructure")?;
    let mut signals = HashMap::new();
    for (id, p) in &cfg.signals {
        let buf = wav_read(p)?;
        signals.insert(id.clone(), buf.channel(0).to_vec());
    }
    let r = render_scene(&cfg.scene, &bank, &signals)?;
    let f32 = WavEncoding::Float32;
    wav_write(&AudioBuffer::new(vec![r.ref_channel, r.struct_channel])?, c.out.join("mixture.wav"), f32)?;
    if let Some(a) = r.array_channels.filter(|a| !a.is_empty()) {
        wav_write(&AudioBuffer::new(a)?, c.out.join("array.wav"), f32)?;
    }
    for (src, x) in cfg.scene.sources.iter().zip(r.per_source_clean_ref) {
        wav_write(&AudioBuffer::mono(x), c.out.join(format!("source_{}.wav", src.signal_id)), f32)?;
    }
    Ok(hash)
}

// ---- gen-data ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    /// Either a synthetic corpus to create or an existing corpus directory.
    #[serde(default)]
    corpus: Option<CorpusConfig>,
    #[serde(default)]
    corpus_dir: Option<PathBuf>,
    #[serde(default)]
    rooms: Option<Vec<RoomRef>>,
    #[serde(default)]
    rigs: Option<Vec<RigRef>>,
    mixture: MixtureConfig,
    #[serde(default)]
    microstructure: BankRef,
}

fn run_gen_data(c: &Common) -> Result<String> {
    let (mut cfg, hash): (GenDataConfig, _) = load_config(&c.config)?;
    if let Some(n) = c.n_sectors {
        cfg.mixture.n_sectors = n;
    }
    cfg.mixture.validate().map_err(|e| match e {
        Error::Config { path, message } => config_error(&format!("mixture.{path}"), message),
        other => other,
    })?;
    let rooms = rooms_from("rooms", cfg.rooms, &["room_a", "room_b", "room_c"])?;
    let rigs = rigs_from("rigs", cfg.rigs)?;
    let bank = cfg.microstructure.bank("microstructure")?;
    let clips = match (cfg.corpus, cfg.corpus_dir) {
        (Some(corpus), None) => write_synthetic_corpus(c.out.join("corpus"), &corpus, derive_seed(c.seed, 0))?,
        (None, Some(dir)) => list_corpus(dir)?,
        _ => return Err(config_error("corpus", "give exactly one of corpus and corpus_dir")),
    };
    let records = generate_mixtures(&clips, &rooms, &rigs, &cfg.mixture, &bank, derive_seed(c.seed, 1), &c.out)?;
    println!("{} records written to {}", records.len(), c.out.join("manifest.jsonl").display());
    Ok(hash)
}

// ---- fit-stats ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitStatsConfig {
    manifest: PathBuf,
    #[serde(default = "all_records")]
    max_records: usize,
    #[serde(default)]
    frame: FrameSpec,
}

fn all_records() -> usize {
    usize::MAX
}

fn run_fit_stats(c: &Common) -> Result<String> {
    let (cfg, hash): (FitStatsConfig, _) = load_config(&c.config)?;
    let manifest = Manifest::load(cfg.manifest)?;
    let stats = fit_norm_stats(&manifest, &cfg.frame, cfg.max_records)?;
    write_json(&c.out.join("stats.json"), &stats)?;
    stats.write_csv(c.out.join("stats.csv"))?;
    Ok(hash)
}

// ---- train ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    manifest: PathBuf,
    /// Normalization stats from `fit-stats`; fitted on the manifest when absent.
    #[serde(default)]
    stats: Option<PathBuf>,
    #[serde(default)]
    net: Option<NetConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn run_train(c: &Common) -> Result<String> {
    let (cfg, hash): (TrainCliConfig, _) = load_config(&c.config)?;
    let manifest = Manifest::load(cfg.manifest)?;
    let mut net = match cfg.net {
        Some(n) => n,
        None => NetConfig::new(
            c.n_sectors
                .or_else(|| manifest.records.first().map(|r| r.n_sectors))
                .unwrap_or(6),
        ),
    };
    if let Some(n) = c.n_sectors {
        net.n_sectors = n;
    }
    net.validate().map_err(|e| match e {
        Error::Config { path, message } => config_error(&format!("net.{path}"), message),
        other => other,
    })?;
    let tc = cfg.train.unwrap_or_default();
    tc.validate().map_err(|e| match e {
        Error::Config { path, message } => config_error(&format!("train.{path}"), message),
        other => other,
    })?;
    let stats: NormStats = match cfg.stats {
        Some(p) => {
            let p = p;
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            parse_json(&text).map_err(|e| config_error("stats", e.to_string()))?
        }
        None => fit_norm_stats(&manifest, &net.frame, usize::MAX)?,
    };
    let started = Instant::now();
    let mut log = String::from("epoch,learning_rate,mean_loss\n");
    let report = train(&manifest, &net, &stats, &tc, c.seed, |epoch, lr, loss| {
        log.push_str(&format!("{epoch},{lr},{loss}\n"));
        eprintln!("epoch {epoch:>3}  lr {lr:.2e}  loss {loss:>9.4}  {:.0} s", started.elapsed().as_secs_f64());
    })?;
    report.checkpoint.save(c.out.join("checkpoint.ssdx"))?;
    write_text(&c.out.join("train_log.csv"), &log)?;
    let wall_s = started.elapsed().as_secs_f64();
    let cpu_s = process_cpu_seconds();
    eprintln!("training took {wall_s:.1} s wall, {:.1} s cpu", cpu_s.unwrap_or(f64::NAN));
    // Kept apart from the checkpoint and log, which are reproducible.
    write_json(
        &c.out.join("train_timing.json"),
        &serde_json::json!({ "wall_s": wall_s, "process_cpu_s": cpu_s, "steps": report.checkpoint.meta.steps }),
    )?;
    Ok(hash)
}

/// User plus system CPU time of this process, where `/proc` provides it.
fn process_cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // Fields after the parenthesised command name; utime and stime are the 12th and 13th.
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let ticks: f64 = f.get(11)?.parse::<f64>().ok()? + f.get(12)?.parse::<f64>().ok()?;
    Some(ticks / 100.0)
}

// ---- infer / stream ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InferConfig {
    checkpoint: PathBuf,
    /// Two-channel WAV: reference mic, structured mic.
    input: PathBuf,
    /// 1-based sectors to extract.
    sectors: Vec<usize>,
}

struct Loaded {
    model: dirsep::net::Model,
    query: AngleQuery,
    audio: AudioBuffer,
}

fn load_inference(c: &Common, cfg: &InferConfig) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    if let Some(n) = c.n_sectors {
        ckpt.require_sectors(n)?;
    }
    let n = ckpt.config.n_sectors;
    let query = AngleQuery::from_sectors(n, &cfg.sectors).map_err(|e| config_error("sectors", e.to_string()))?;
    let audio = wav_read(&cfg.input)?;
    if audio.num_channels() != 2 {
        return Err(Error::Shape(format!("input has {} channels, need 2", audio.num_channels())));
    }
    Ok(Loaded {
        model: ckpt.to_model()?,
        query,
        audio,
    })
}

fn run_infer(c: &Common) -> Result<String> {
    let (cfg, hash): (InferConfig, _) = load_config(&c.config)?;
    let l = load_inference(c, &cfg)?;
    let y = l.model.forward_offline(&l.audio, &l.query)?;
    wav_write(&AudioBuffer::mono(y), c.out.join("extracted.wav"), WavEncoding::Float32)?;
    Ok(hash)
}

#[derive(Serialize)]
struct StreamTiming {
    chunks: usize,
    chunk_samples: usize,
    flush_chunks: usize,
    mean_ms: f64,
    std_ms: f64,
    max_ms: f64,
    realtime_budget_ms: f64,
}

fn run_stream(c: &Common) -> Result<String> {
    let (cfg, hash): (InferConfig, _) = load_config(&c.config)?;
    let l = load_inference(c, &cfg)?;
    let hop = l.model.config().chunk_samples();
    let delay = l.model.config().lookahead_samples();
    let n = l.audio.len();
    let chunks = n.div_ceil(hop);
    let total = (n + delay).div_ceil(hop).max(chunks);
    let pad = |x: &[f64]| {
        let mut v = x.to_vec();
        v.resize(total * hop, 0.0);
        v
    };
    let (r, s) = (pad(l.audio.channel(0)), pad(l.audio.channel(1)));
    let mut streamer = Streamer::new(&l.model, &l.query)?;
    let mut out = Vec::with_capacity(total * hop);
    let mut ms = Vec::with_capacity(chunks);
    for k in 0..total {
        let t = Instant::now();
        let y = streamer.step(&l.query, &r[k * hop..(k + 1) * hop], &s[k * hop..(k + 1) * hop])?;
        if k < chunks {
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        out.extend(y);
    }
    let y = out[delay..delay + n].to_vec();
    wav_write(&AudioBuffer::mono(y), c.out.join("extracted.wav"), WavEncoding::Float32)?;
    let mean = ms.iter().sum::<f64>() / ms.len().max(1) as f64;
    let std = (ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ms.len().max(1) as f64).sqrt();
    let timing = StreamTiming {
        chunks,
        chunk_samples: hop,
        flush_chunks: total - chunks,
        mean_ms: mean,
        std_ms: std,
        max_ms: ms.iter().copied().fold(0.0, f64::max),
        realtime_budget_ms: hop as f64 * 1e3 / SAMPLE_RATE as f64,
    };
    println!("{chunks} chunks, {mean:.3} ± {std:.3} ms per chunk");
    write_json(&c.out.join("timing.json"), &timing)?;
    Ok(hash)
}

// ---- baseline ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineConfig {
    /// Multichannel array WAV.
    input: PathBuf,
    method: Beamformer,
    /// Device-frame mic positions; defaults to the first preset rig.
    #[serde(default)]
    geometry: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    channels: Option<usize>,
    sectors: Vec<usize>,
    #[serde(default = "default_sectors")]
    n_sectors: usize,
    /// Leading target-free span used for the MVDR covariance.
    #[serde(default = "default_head_s")]
    noise_head_s: f64,
    #[serde(default)]
    frame: FrameSpec,
}

fn default_sectors() -> usize {
    6
}

fn default_head_s() -> f64 {
    0.5
}

fn run_baseline(c: &Common) -> Result<String> {
    let (mut cfg, hash): (BaselineConfig, _) = load_config(&c.config)?;
    if let Some(n) = c.n_sectors {
        cfg.n_sectors = n;
    }
    check_sectors("n_sectors", cfg.n_sectors)?;
    let query = AngleQuery::from_sectors(cfg.n_sectors, &cfg.sectors).map_err(|e| config_error("sectors", e.to_string()))?;
    let audio = wav_read(cfg.input)?;
    let channels = cfg.channels.unwrap_or(audio.num_channels());
    if channels == 0 || channels > audio.num_channels() {
        return Err(config_error("channels", format!("{channels} of {} available", audio.num_channels())));
    }
    let geometry = match cfg.geometry {
        Some(p) => ArrayGeometry::new(p.into_iter().take(channels).collect()),
        None => ArrayGeometry::from_rig(&preset_rigs()[0].1, channels),
    }
    .map_err(|e| config_error("geometry", e.to_string()))?;
    let picked = AudioBuffer::new(audio.channels()[..channels].to_vec())?;
    let head = (cfg.noise_head_s.max(0.0) * SAMPLE_RATE as f64).round() as usize;
    let y = beamform(&picked, &geometry, &query, cfg.method, &cfg.frame, head)?;
    wav_write(&AudioBuffer::mono(y), c.out.join("beamformed.wav"), WavEncoding::Float32)?;
    Ok(hash)
}

// ---- eval ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    manifest: PathBuf,
    systems: Vec<System>,
    /// Checkpoint per neural system.
    #[serde(default)]
    checkpoints: BTreeMap<System, PathBuf>,
    /// Per-system manifest override, e.g. flat-bank renders of the same scenes.
    #[serde(default)]
    manifests: BTreeMap<System, PathBuf>,
    #[serde(default = "default_array_channels")]
    array_channels: usize,
    #[serde(default)]
    frame: FrameSpec,
}

fn default_array_channels() -> usize {
    4
}

fn run_eval(c: &Common) -> Result<String> {
    let (cfg, hash): (EvalConfig, _) = load_config(&c.config)?;
    require_models(&cfg.systems, |s| cfg.checkpoints.contains_key(&s))?;
    let rigs = rig_presets();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &system in &cfg.systems {
        let mpath = cfg.manifests.get(&system).unwrap_or(&cfg.manifest);
        let manifest = Manifest::load(mpath)?;
        if let Some(n) = c.n_sectors {
            if let Some(r) = manifest.records.iter().find(|r| r.n_sectors != n) {
                return Err(Error::Compatibility(format!("record {} has {} sectors, expected {n}", r.id, r.n_sectors)));
            }
        }
        let model = match cfg.checkpoints.get(&system).filter(|_| system.is_neural()) {
            Some(p) => Some(Checkpoint::load(p)?.to_model()?),
            None => None,
        };
        let processor = match (system, &model) {
            (System::Das | System::Mvdr, _) => Processor::Beamformer {
                method: if system == System::Das { Beamformer::Das } else { Beamformer::Mvdr },
                channels: cfg.array_channels,
                rigs: &rigs,
                frame_spec: cfg.frame.clone(),
            },
            (System::Mixture, _) => Processor::Mixture,
            (_, Some(m)) => Processor::Neural(m),
            (_, None) => unreachable!("checked by require_models"),
        };
        let started = Instant::now();
        let (r, s) = score_system(&manifest, system, &processor)?;
        eprintln!("{}: {} records in {:.1} s", system.name(), r.len(), started.elapsed().as_secs_f64());
        rows.extend(r);
        skipped.extend(s);
    }
    let report = EvalReport::new(rows, skipped);
    report.write(&c.out)?;
    for a in report.aggregates.iter().filter(|a| !a.group.starts_with("sector")) {
        println!(
            "{:<14} {:<8} n={:<4} SI-SDRi {:>6.2} ± {:.2} dB  positive {:.1}%",
            a.system.name(),
            a.group,
            a.n,
            a.mean_si_sdri_db,
            a.std_si_sdri_db,
            100.0 * a.fraction_positive
        );
    }
    Ok(hash)
}

// ---- mic-sep ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MicSepCliConfig {
    #[serde(default)]
    rooms: Option<Vec<RoomRef>>,
    n_placements: usize,
    #[serde(default)]
    distances_m: Option<Vec<f64>>,
    #[serde(default)]
    signal_s: Option<f64>,
    #[serde(default)]
    band_hz: Option<(f64, f64)>,
}

fn run_mic_sep(c: &Common) -> Result<String> {
    let (cfg, hash): (MicSepCliConfig, _) = load_config(&c.config)?;
    let rooms = rooms_from("rooms", cfg.rooms, &["room_a", "room_b"])?;
    if cfg.n_placements == 0 {
        return Err(config_error("n_placements", "must be positive"));
    }
    let mut ms = MicSepConfig::new(rooms.into_iter().map(|(_, r)| r).collect(), cfg.n_placements);
    if let Some(d) = cfg.distances_m {
        ms.distances_m = d;
    }
    if let Some(s) = cfg.signal_s {
        ms.signal_s = s;
    }
    if let Some(b) = cfg.band_hz {
        ms.band_hz = b;
    }
    let result = mic_separation_experiment(&ms, c.seed)?;
    result.write_csv(c.out.join("variation.csv"))?;
    write_json(&c.out.join("variation.json"), &result)?;
    for (d, m) in result.distances_m.iter().zip(&result.band_mean_db) {
        println!("{:>5.1} cm  {m:.3} dB", d * 100.0);
    }
    Ok(hash)
}

fn dispatch(cli: Cli) -> Result<()> {
    let (name, common, run): (&str, Common, fn(&Common) -> Result<String>) = match cli.command {
        Command::Design(c) => ("design", c, run_design),
        Command::Simulate(c) => ("simulate", c, run_simulate),
        Command::GenData(c) => ("gen-data", c, run_gen_data),
        Command::FitStats(c) => ("fit-stats", c, run_fit_stats),
        Command::Train(c) => ("train", c, run_train),
        Command::Infer(c) => ("infer", c, run_infer),
        Command::Stream(c) => ("stream", c, run_stream),
        Command::Baseline(c) => ("baseline", c, run_baseline),
        Command::Eval(c) => ("eval", c, run_eval),
        Command::MicSep(c) => ("mic-sep", c, run_mic_sep),
    };
    if let Some(n) = common.n_sectors {
        check_sectors("--n-sectors", n)?;
    }
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let config_sha256 = run(&common)?;
    write_json(
        &common.out.join("run.json"),
        &RunMetadata {
            command: name,
            config_sha256,
            seed: common.seed,
            n_sectors: common.n_sectors,
            prng_algorithm: PRNG_ALGORITHM,
            artifact_version: env!("CARGO_PKG_VERSION"),
        },
    )
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
