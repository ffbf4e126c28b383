use std::path::Path;

use dirsep::autodiff::{Adam, AdamConfig};
use dirsep::corpus::{write_synthetic_corpus, CorpusConfig};
use dirsep::features::fit_norm_stats;
use dirsep::metrics::si_sdr;
use dirsep::microstructure::{DirectionFilterBank, MicrostructureSpec};
use dirsep::net::{load_example, train, Checkpoint, Model, NetConfig, TrainConfig};
use dirsep::scene::{generate_mixtures, preset_rigs, preset_rooms, Manifest, MixtureConfig};
use dirsep::signal::AudioBuffer;
use dirsep::Error;

fn manifest(dir: &Path, empty_rate: f64) -> Manifest {
    let clips = write_synthetic_corpus(dir.join("corpus"), &CorpusConfig { n_clips: 6, seconds: 3.0 }, 21).unwrap();
    let bank = DirectionFilterBank::from_spec(&MicrostructureSpec::default()).unwrap();
    let mut cfg = MixtureConfig::new(6, 1, 1);
    cfg.empty_target_rate = empty_rate;
    let out = dir.join("data");
    generate_mixtures(&clips, &preset_rooms()[..1], &preset_rigs()[..1], &cfg, &bank, 4, &out).unwrap();
    Manifest::load(out.join("manifest.jsonl")).unwrap()
}

fn small_net() -> NetConfig {
    NetConfig {
        embed_channels: 4,
        blstm_hidden: 4,
        causal_lstm_hidden: 4,
        angle_hidden: 4,
        ..NetConfig::new(6)
    }
}

fn short_run() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        segment_s: Some(0.25),
        records_per_epoch: Some(4),
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 0.3);
    let net = small_net();
    let stats = fit_norm_stats(&m, &net.frame, 3).unwrap();
    let cfg = short_run();
    let mut losses = Vec::new();
    let a = train(&m, &net, &stats, &cfg, 17, |e, lr, l| losses.push((e, lr, l))).unwrap();
    let b = train(&m, &net, &stats, &cfg, 17, |_, _, _| {}).unwrap();
    let c = train(&m, &net, &stats, &cfg, 18, |_, _, _| {}).unwrap();
    let bytes = a.checkpoint.to_bytes().unwrap();
    assert_eq!(bytes, b.checkpoint.to_bytes().unwrap());
    assert_ne!(bytes, c.checkpoint.to_bytes().unwrap());
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|(_, _, l)| l.is_finite()));
    assert_eq!(a.checkpoint.meta.steps, 2);
    assert_eq!(a.checkpoint.meta.epoch_losses, losses.iter().map(|x| x.2).collect::<Vec<_>>());
    // The saved model is the trained model.
    let back = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
    let ex = load_example(&m, 0).unwrap();
    let audio = AudioBuffer::new(vec![ex.ref_mic, ex.struct_mic]).unwrap();
    assert_eq!(
        back.forward_offline(&audio, &ex.query).unwrap(),
        a.model.forward_offline(&audio, &ex.query).unwrap()
    );
}

#[test]
fn training_rejects_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 0.0);
    let net = small_net();
    let stats = fit_norm_stats(&m, &net.frame, 1).unwrap();
    let nine = NetConfig { n_sectors: 9, ..small_net() };
    assert!(matches!(
        train(&m, &nine, &stats, &short_run(), 1, |_, _, _| {}),
        Err(Error::Compatibility(_))
    ));
    let empty = Manifest {
        dir: m.dir.clone(),
        records: vec![],
    };
    assert!(matches!(
        train(&empty, &net, &stats, &short_run(), 1, |_, _, _| {}),
        Err(Error::Resource(_))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..short_run()
    };
    assert!(matches!(train(&m, &net, &stats, &bad, 1, |_, _, _| {}), Err(Error::Config { .. })));
}

/// A default-size network fits one short excerpt well above the mixture.
#[test]
fn network_overfits_one_excerpt() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 0.0);
    let net = NetConfig::new(6);
    let stats = fit_norm_stats(&m, &net.frame, 6).unwrap();
    let mut model = Model::new(net, stats, 1).unwrap();
    let mut ex = load_example(&m, 0).unwrap();
    let span = 12000..24000;
    for x in [&mut ex.ref_mic, &mut ex.struct_mic, &mut ex.target] {
        *x = x[span.clone()].to_vec();
    }
    let before = si_sdr(&ex.ref_mic, &ex.target).unwrap();
    let mut adam = Adam::new(
        AdamConfig {
            clip_norm: Some(5.0),
            ..Default::default()
        },
        model.params().values(),
    );
    for _ in 0..300 {
        let (_, g) = model.loss_and_grads(&ex, 50.0).unwrap();
        adam.update(model.params_mut().values_mut(), &g, 2e-3).unwrap();
    }
    let audio = AudioBuffer::new(vec![ex.ref_mic.clone(), ex.struct_mic.clone()]).unwrap();
    let after = si_sdr(&model.forward_offline(&audio, &ex.query).unwrap(), &ex.target).unwrap();
    assert!(after >= 10.0 && after - before >= 10.0, "before {before:.2} dB, after {after:.2} dB");
}
