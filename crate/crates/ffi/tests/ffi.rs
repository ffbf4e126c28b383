use std::ffi::{CStr, CString};
use std::ptr;

use dirsep::features::NormStats;
use dirsep::net::{AngleQuery, Checkpoint, Model, NetConfig, TrainingMeta};
use dirsep::signal::AudioBuffer;
use dirsep_ffi::*;

fn saved_model(dir: &std::path::Path) -> (CString, Model) {
    let cfg = NetConfig::new(6);
    let mut model = Model::new(cfg.clone(), NormStats::neutral(cfg.bins()), 5).unwrap();
    model.round_to_f32();
    let meta = TrainingMeta {
        seed: 5,
        epochs: 0,
        steps: 0,
        epoch_losses: vec![],
    };
    let path = dir.join("m.ssdx");
    Checkpoint::from_model(&model, meta).save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

fn signal(len: usize, k: f64) -> Vec<f64> {
    (0..len).map(|i| 0.3 * (0.011 * k * i as f64).sin() + 0.05 * (0.3 * i as f64).cos()).collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsx_last_error()) }.to_str().unwrap().to_string()
}

#[test]
fn offline_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dsx_model_load(path.as_ptr(), &mut handle) }, DsxStatus::Ok);
    let (mut n, mut chunk, mut delay) = (0u32, 0u32, 0u32);
    assert_eq!(unsafe { dsx_model_info(handle, &mut n, &mut chunk, &mut delay) }, DsxStatus::Ok);
    assert_eq!((n, chunk, delay), (6, 192, 96));
    let (r, s) = (signal(4000, 1.0), signal(4000, 1.7));
    let mut out = vec![0.0; r.len()];
    let st = unsafe { dsx_infer(handle, 0b100, r.as_ptr(), s.as_ptr(), r.len(), out.as_mut_ptr()) };
    assert_eq!(st, DsxStatus::Ok);
    let q = AngleQuery::new(6, 0b100).unwrap();
    let want = model.forward_offline(&AudioBuffer::new(vec![r, s]).unwrap(), &q).unwrap();
    assert_eq!(out, want);
    unsafe { dsx_model_free(handle) };
}

#[test]
fn stream_outlives_model_handle_and_matches_offline() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dsx_model_load(path.as_ptr(), &mut handle) }, DsxStatus::Ok);
    let mut stream = ptr::null_mut();
    assert_eq!(unsafe { dsx_stream_new(handle, 0b11, &mut stream) }, DsxStatus::Ok);
    unsafe { dsx_model_free(handle) };
    let chunks = 30;
    let (r, s) = (signal(chunks * 192, 2.0), signal(chunks * 192, 0.6));
    let mut out = vec![0.0; chunks * 192];
    for k in 0..chunks {
        let span = k * 192..(k + 1) * 192;
        let st = unsafe {
            dsx_stream_step(
                stream,
                0b11,
                r[span.clone()].as_ptr(),
                s[span.clone()].as_ptr(),
                192,
                out[span].as_mut_ptr(),
            )
        };
        assert_eq!(st, DsxStatus::Ok);
    }
    let q = AngleQuery::new(6, 0b11).unwrap();
    let offline = model.forward_offline(&AudioBuffer::new(vec![r, s]).unwrap(), &q).unwrap();
    let n = chunks * 192 - 96;
    let err = (0..n).map(|i| (out[i + 96] - offline[i]).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-9, "{err}");
    assert_eq!(unsafe { dsx_stream_reset(stream, 0b1) }, DsxStatus::Ok);
    unsafe { dsx_stream_free(stream) };
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("nope.ssdx").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dsx_model_load(missing.as_ptr(), &mut handle) }, DsxStatus::Io);
    assert!(last_error().contains("nope.ssdx"));
    assert!(handle.is_null());
    assert_eq!(unsafe { dsx_model_load(ptr::null(), &mut handle) }, DsxStatus::NullPointer);

    let junk = dir.path().join("junk.ssdx");
    std::fs::write(&junk, b"SSDXjunk").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dsx_model_load(junk.as_ptr(), &mut handle) }, DsxStatus::Incompatible);

    assert_eq!(unsafe { dsx_model_load(path.as_ptr(), &mut handle) }, DsxStatus::Ok);
    let mut stream = ptr::null_mut();
    assert_eq!(unsafe { dsx_stream_new(handle, 0, &mut stream) }, DsxStatus::InvalidArgument);
    assert_eq!(unsafe { dsx_stream_new(handle, 1 << 6, &mut stream) }, DsxStatus::InvalidArgument);
    assert_eq!(unsafe { dsx_stream_new(handle, 0b1, &mut stream) }, DsxStatus::Ok);
    let buf = vec![0.0; 100];
    let mut out = vec![0.0; 100];
    let st = unsafe { dsx_stream_step(stream, 0b1, buf.as_ptr(), buf.as_ptr(), 100, out.as_mut_ptr()) };
    assert_eq!(st, DsxStatus::InvalidArgument);
    let buf = vec![0.0; 192];
    let mut out = vec![0.0; 192];
    let st = unsafe { dsx_stream_step(stream, 0b10, buf.as_ptr(), buf.as_ptr(), 192, out.as_mut_ptr()) };
    assert_eq!(st, DsxStatus::Incompatible);
    let st = unsafe { dsx_stream_step(stream, 0b1, buf.as_ptr(), ptr::null(), 192, out.as_mut_ptr()) };
    assert_eq!(st, DsxStatus::NullPointer);
    unsafe {
        dsx_stream_free(stream);
        dsx_model_free(handle);
        dsx_stream_free(ptr::null_mut());
        dsx_model_free(ptr::null_mut());
    }
}

#[test]
fn si_sdr_through_the_boundary() {
    let s = signal(1000, 1.3);
    let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
    let mut db = 0.0;
    assert_eq!(unsafe { dsx_si_sdr(doubled.as_ptr(), s.as_ptr(), s.len(), &mut db) }, DsxStatus::Ok);
    assert_eq!(db, 100.0);
    let zero = vec![0.0; 1000];
    let st = unsafe { dsx_si_sdr(s.as_ptr(), zero.as_ptr(), s.len(), &mut db) };
    assert_eq!(st, DsxStatus::DegenerateSignal);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dirsep.h")).unwrap();
    for name in [
        "dsx_last_error",
        "dsx_model_load",
        "dsx_model_free",
        "dsx_model_info",
        "dsx_infer",
        "dsx_stream_new",
        "dsx_stream_step",
        "dsx_stream_reset",
        "dsx_stream_free",
        "dsx_si_sdr",
        "typedef struct DsxModel DsxModel;",
        "DSX_STATUS_INCOMPATIBLE = 6",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"dirsep.h\"\nint main(void) { DsxModel *m = 0; return dsx_model_load(\"x\", &m) == DSX_STATUS_OK; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let Ok(status) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(status.success());
}
