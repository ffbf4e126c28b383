use std::collections::BTreeSet;
use std::path::Path;

use dirsep::corpus::{write_synthetic_corpus, CorpusConfig};
use dirsep::microstructure::{DirectionFilterBank, MicrostructureSpec};
use dirsep::scene::{
    combinations, generate_mixtures, list_corpus, preset_rigs, preset_rooms, read_manifest, MixtureConfig, Role,
};
use dirsep::signal::{rms, wav_read};

fn corpus(dir: &Path, n: usize) -> Vec<dirsep::scene::CorpusClip> {
    write_synthetic_corpus(dir, &CorpusConfig { n_clips: n, seconds: 3.0 }, 11).unwrap()
}

fn bank() -> DirectionFilterBank {
    DirectionFilterBank::from_spec(&MicrostructureSpec::default()).unwrap()
}

#[test]
fn combination_classes() {
    assert_eq!(combinations(6, 1).len(), 6);
    assert_eq!(combinations(6, 2).len(), 15);
    assert_eq!(combinations(6, 3).len(), 20);
    assert_eq!(combinations(9, 1).len(), 9);
    assert_eq!(combinations(6, 2)[0], 0b11);
    let all: BTreeSet<u32> = combinations(6, 3).into_iter().collect();
    assert!(all.iter().all(|m| m.count_ones() == 3 && *m < 64));
    assert_eq!(all.len(), 20);
}

#[test]
fn forty_one_records_with_valid_labels() {
    let dir = tempfile::tempdir().unwrap();
    let clips = corpus(&dir.path().join("corpus"), 6);
    let rooms = &preset_rooms()[..1];
    let rigs = &preset_rigs()[..1];
    let cfg = MixtureConfig::new(6, 3, 1);
    let out = dir.path().join("data");
    let recs = generate_mixtures(&clips, rooms, rigs, &cfg, &bank(), 5, &out).unwrap();
    assert_eq!(recs.len(), 41);
    let classes: Vec<usize> = (1..=3)
        .map(|k| {
            recs.iter()
                .filter(|r| r.selected_sectors.count_ones() == k)
                .map(|r| r.selected_sectors)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .collect();
    assert_eq!(classes, vec![6, 15, 20]);
    let back = read_manifest(out.join("manifest.jsonl")).unwrap();
    assert_eq!(back, recs);
    for r in &recs {
        r.validate().unwrap();
        assert_eq!(r.prng, "xoshiro256**");
        let n_int = r.per_source.iter().filter(|s| s.role == Role::Interferer).count();
        assert!((1..=2).contains(&n_int));
        for s in &r.per_source {
            assert!((0.5..=2.5).contains(&s.distance_m));
            assert_eq!(dirsep::scene::sector_of(s.angle_deg, 6).unwrap(), s.sector);
            if s.role == Role::Interferer {
                assert!((-5.0..=5.0).contains(&s.snr_db));
            }
        }
        let mix = wav_read(out.join(&r.mixture_wav_path)).unwrap();
        assert_eq!(mix.num_channels(), 2);
        assert_eq!(mix.len(), 72000);
        let target = wav_read(out.join(&r.target_wav_path)).unwrap();
        let head = r.noise_head_samples;
        assert!(target.channel(0)[..head].iter().all(|v| v.abs() < 1e-9));
        if r.target_present() {
            assert!(rms(target.channel(0)) > 0.0);
        } else {
            assert!(target.channel(0).iter().all(|v| v.abs() < 1e-9));
        }
        let arr = wav_read(out.join(r.array_wav_path.as_ref().unwrap())).unwrap();
        assert_eq!(arr.num_channels(), 4);
    }
}

#[test]
fn nine_sectors_single_target() {
    let dir = tempfile::tempdir().unwrap();
    let clips = corpus(&dir.path().join("corpus"), 4);
    let cfg = MixtureConfig::new(9, 1, 1);
    let recs = generate_mixtures(
        &clips,
        &preset_rooms()[..1],
        &preset_rigs()[..1],
        &cfg,
        &bank(),
        1,
        dir.path().join("d"),
    )
    .unwrap();
    assert_eq!(recs.len(), 9);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let clips = corpus(&dir.path().join("corpus"), 5);
    let mut cfg = MixtureConfig::new(6, 1, 1);
    cfg.duration_s = 1.5;
    let run = |name: &str, seed: u64| {
        let out = dir.path().join(name);
        generate_mixtures(&clips, &preset_rooms()[..1], &preset_rigs()[..1], &cfg, &bank(), seed, &out).unwrap();
        out
    };
    let (a, b, c) = (run("a", 9), run("b", 9), run("c", 10));
    let read = |d: &Path, rel: &str| std::fs::read(d.join(rel)).unwrap();
    assert_eq!(read(&a, "manifest.jsonl"), read(&b, "manifest.jsonl"));
    assert_ne!(read(&a, "manifest.jsonl"), read(&c, "manifest.jsonl"));
    for r in read_manifest(a.join("manifest.jsonl")).unwrap() {
        assert_eq!(read(&a, &r.mixture_wav_path), read(&b, &r.mixture_wav_path));
        assert_eq!(read(&a, &r.target_wav_path), read(&b, &r.target_wav_path));
    }
}

#[test]
fn small_corpus_is_exhausted() {
    let dir = tempfile::tempdir().unwrap();
    let clips = corpus(&dir.path().join("corpus"), 2);
    let mut cfg = MixtureConfig::new(6, 3, 1);
    cfg.empty_target_rate = 0.0;
    cfg.duration_s = 1.0;
    let err = generate_mixtures(&clips, &preset_rooms()[..1], &preset_rigs()[..1], &cfg, &bank(), 1, dir.path().join("d"))
        .unwrap_err();
    assert!(matches!(err, dirsep::Error::Resource(_)), "{err}");
}

#[test]
fn listing_sorts_clips() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let listed = list_corpus(dir.path()).unwrap();
    let ids: Vec<&str> = listed.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["clip_0000", "clip_0001", "clip_0002"]);
}

#[test]
fn invalid_sector_count_names_field() {
    let cfg = MixtureConfig::new(7, 1, 1);
    match cfg.validate() {
        Err(dirsep::Error::Config { path, .. }) => assert_eq!(path, "n_sectors"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn presets_fit_every_room() {
    for (_, room) in preset_rooms() {
        for (_, rig) in preset_rigs() {
            rig.validate(&room).unwrap();
        }
    }
}
