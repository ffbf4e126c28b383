use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{si_sdr_loss, AngleQuery, Checkpoint, Model, NetConfig, TrainingMeta, L1_WEIGHT};
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::error::{bail, Error, Result};
use crate::features::NormStats;
use crate::rng::{child_rng, derive_seed, Rng};
use crate::scene::Manifest;
use crate::signal::SAMPLE_RATE;

/// Warmup, plateau and step decay, indexed by epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    /// Linear ramp from `start` at epoch 0 to `peak` at this epoch.
    pub warmup_epochs: usize,
    /// Last epoch held at `peak`.
    pub hold_until: usize,
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 5e-4,
            peak: 5e-3,
            warmup_epochs: 10,
            hold_until: 30,
            decay: 0.95,
            decay_every: 2,
        }
    }
}

pub fn learning_rate(s: &LrSchedule, epoch: usize) -> f64 {
    if epoch <= s.warmup_epochs {
        if s.warmup_epochs == 0 {
            return s.peak;
        }
        s.start + (s.peak - s.start) * epoch as f64 / s.warmup_epochs as f64
    } else if epoch <= s.hold_until {
        s.peak
    } else {
        let steps = (epoch - s.hold_until) / s.decay_every.max(1);
        s.peak * s.decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub shift_prob: f64,
    pub max_shift_s: f64,
    pub gain_prob: f64,
    pub max_gain_db: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_prob: 0.3,
            max_shift_s: 0.25,
            gain_prob: 0.3,
            max_gain_db: 3.0,
        }
    }
}

fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    4
}
fn default_adam() -> AdamConfig {
    AdamConfig {
        clip_norm: Some(5.0),
        ..AdamConfig::default()
    }
}
fn default_l1() -> f64 {
    L1_WEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_adam")]
    pub adam: AdamConfig,
    #[serde(default = "default_l1")]
    pub l1_weight: f64,
    /// Random excerpt length per example; whole records when unset.
    #[serde(default)]
    pub segment_s: Option<f64>,
    /// Examples drawn per epoch from the shuffled manifest; all when unset.
    #[serde(default)]
    pub records_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            schedule: LrSchedule::default(),
            augment: AugmentConfig::default(),
            adam: default_adam(),
            l1_weight: default_l1(),
            segment_s: None,
            records_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |p: &str, m: String| Error::Config {
            path: p.into(),
            message: m,
        };
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be positive".into()));
        }
        for (p, v) in [("augment.shift_prob", self.augment.shift_prob), ("augment.gain_prob", self.augment.gain_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field(p, format!("probability {v} outside [0, 1]")));
            }
        }
        if let Some(s) = self.segment_s {
            if !(s > 0.0) {
                return Err(field("segment_s", format!("{s} must be positive")));
            }
        }
        if !(self.schedule.peak > 0.0 && self.schedule.start > 0.0) {
            return Err(field("schedule", "learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One training example after augmentation and cropping.
#[derive(Debug, Clone)]
pub struct Example {
    pub ref_mic: Vec<f64>,
    pub struct_mic: Vec<f64>,
    pub target: Vec<f64>,
    pub target_present: bool,
    pub query: AngleQuery,
}

/// Targets quieter than this RMS over an excerpt count as absent.
const PRESENT_RMS: f64 = 1e-3;

fn augment(ex: &mut Example, cfg: &AugmentConfig, rng: &mut Rng) {
    let n = ex.target.len();
    if rng.random::<f64>() < cfg.shift_prob && n > 0 {
        let max = (cfg.max_shift_s * SAMPLE_RATE as f64) as i64;
        let shift = rng.random_range(-max..=max).rem_euclid(n as i64) as usize;
        for x in [&mut ex.ref_mic, &mut ex.struct_mic, &mut ex.target] {
            x.rotate_right(shift);
        }
    }
    if rng.random::<f64>() < cfg.gain_prob {
        let db = rng.random_range(-cfg.max_gain_db..=cfg.max_gain_db);
        let g = 10f64.powf(db / 20.0);
        for x in [&mut ex.ref_mic, &mut ex.struct_mic, &mut ex.target] {
            x.iter_mut().for_each(|v| *v *= g);
        }
    }
}

fn crop(ex: &mut Example, samples: usize, rng: &mut Rng) {
    let n = ex.target.len();
    if samples >= n {
        return;
    }
    let start = rng.random_range(0..=n - samples);
    for x in [&mut ex.ref_mic, &mut ex.struct_mic, &mut ex.target] {
        x.drain(..start);
        x.truncate(samples);
    }
}

impl Model {
    /// Loss on one example and the gradient of every parameter.
    pub fn loss_and_grads(&self, ex: &Example, l1_weight: f64) -> Result<(f64, Vec<Tensor>)> {
        let (x1, feats) = self.analyze(&ex.ref_mic, &ex.struct_mic)?;
        let tape = Tape::new();
        let p = self.params().bind(&tape);
        let film = self.film(&p, &ex.query)?;
        let y = self.spectral(&p, &feats, &x1, &film, None)?;
        let est = self.synthesize(y, ex.target.len())?;
        let loss = si_sdr_loss(est, &ex.target, ex.target_present, l1_weight)?;
        let value = loss.value().item();
        let mut grads = tape.backward(loss)?;
        Ok((value, self.params().gradients(&p, &mut grads)))
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub checkpoint: Checkpoint,
}

/// Loads a manifest record as a training example.
pub fn load_example(manifest: &Manifest, index: usize) -> Result<Example> {
    let rec = &manifest.records[index];
    let mix = manifest.mixture(rec)?;
    let target = manifest.target(rec)?;
    Ok(Example {
        ref_mic: mix.channel(0).to_vec(),
        struct_mic: mix.channel(1).to_vec(),
        target,
        target_present: rec.target_present(),
        query: AngleQuery::new(rec.n_sectors, rec.selected_sectors)?,
    })
}

/// Trains a fresh network on every record of `manifest`.
///
/// Single-threaded and fully determined by `seed`. `on_epoch` receives the
/// epoch index, its learning rate and its mean loss.
pub fn train(
    manifest: &Manifest,
    net: &NetConfig,
    stats: &NormStats,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if manifest.records.is_empty() {
        bail!(Resource, "empty training manifest");
    }
    if let Some(r) = manifest.records.iter().find(|r| r.n_sectors != net.n_sectors) {
        bail!(
            Compatibility,
            "record {} uses {} sectors, network expects {}",
            r.id,
            r.n_sectors,
            net.n_sectors
        );
    }
    let mut model = Model::new(net.clone(), stats.clone(), derive_seed(seed, 0))?;
    let mut adam = Adam::new(cfg.adam, model.params().values());
    let segment = cfg.segment_s.map(|s| (s * SAMPLE_RATE as f64).round() as usize);
    let per_epoch = cfg
        .records_per_epoch
        .unwrap_or(manifest.records.len())
        .min(manifest.records.len())
        .max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(&cfg.schedule, epoch);
        let mut order: Vec<usize> = (0..manifest.records.len()).collect();
        order.shuffle(&mut child_rng(seed, 1 + epoch as u64));
        order.truncate(per_epoch);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Tensor> = model.params().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (j, &idx) in batch.iter().enumerate() {
                let stream = ((epoch as u64) << 32) | ((b * cfg.batch_size + j) as u64);
                let mut rng = child_rng(derive_seed(seed, u64::MAX), stream);
                let mut ex = load_example(manifest, idx)?;
                augment(&mut ex, &cfg.augment, &mut rng);
                if let Some(len) = segment {
                    crop(&mut ex, len, &mut rng);
                }
                let rms = crate::signal::rms(&ex.target);
                ex.target_present = ex.target_present && rms >= PRESENT_RMS;
                let (loss, grads) = model.loss_and_grads(&ex, cfg.l1_weight)?;
                total += loss;
                let w = 1.0 / batch.len() as f64;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += w * y;
                    }
                }
            }
            adam.update(model.params_mut().values_mut(), &acc, lr)?;
        }
        let mean = total / order.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, lr, mean);
    }
    model.round_to_f32();
    let meta = TrainingMeta {
        seed,
        epochs: cfg.epochs,
        steps: adam.steps(),
        epoch_losses,
    };
    let checkpoint = Checkpoint::from_model(&model, meta);
    Ok(TrainReport { model, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(learning_rate(&s, 0), 5e-4));
        assert!(close(learning_rate(&s, 5), 2.75e-3));
        assert!(close(learning_rate(&s, 10), 5e-3));
        assert!(close(learning_rate(&s, 30), 5e-3));
        assert!(close(learning_rate(&s, 31), 5e-3));
        assert!(close(learning_rate(&s, 32), 5e-3 * 0.95));
        assert!(close(learning_rate(&s, 34), 5e-3 * 0.95 * 0.95));
    }

    #[test]
    fn crop_and_augment_keep_alignment() {
        let base: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let mut ex = Example {
            ref_mic: base.clone(),
            struct_mic: base.clone(),
            target: base.clone(),
            target_present: true,
            query: AngleQuery::new(6, 1).unwrap(),
        };
        let mut rng = crate::rng::rng_from(3);
        let cfg = AugmentConfig {
            shift_prob: 1.0,
            gain_prob: 1.0,
            ..Default::default()
        };
        augment(&mut ex, &cfg, &mut rng);
        crop(&mut ex, 100, &mut rng);
        assert_eq!(ex.target.len(), 100);
        assert_eq!(ex.ref_mic, ex.target);
        assert_eq!(ex.struct_mic, ex.target);
    }
}
