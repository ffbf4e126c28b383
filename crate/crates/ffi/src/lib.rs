//! C ABI over checkpoint loading, offline and streaming extraction, and the
//! SI-SDR metric.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free`. Every fallible call returns a [`DsxStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`dsx_last_error`]. Sector masks use bit `i` for sector `i + 1`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use dirsep::metrics::si_sdr;
use dirsep::net::{AngleQuery, Checkpoint, Model, Streamer};
use dirsep::signal::AudioBuffer;
use dirsep::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Incompatible = 6,
    Numerical = 7,
    DegenerateSignal = 8,
    Internal = 9,
}

/// A loaded network. Shareable between streams; read-only after loading.
pub struct DsxModel {
    model: Arc<Model>,
}

/// One streaming session with its own recurrent state.
pub struct DsxStream {
    streamer: Streamer<Arc<Model>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DsxStatus {
    match e {
        Error::Io { .. } => DsxStatus::Io,
        Error::Format(_) | Error::Unsupported(_) => DsxStatus::Format,
        Error::Shape(_) | Error::Size(_) => DsxStatus::Shape,
        Error::Compatibility(_) => DsxStatus::Incompatible,
        Error::Numerical(_) => DsxStatus::Numerical,
        Error::DegenerateSignal(_) => DsxStatus::DegenerateSignal,
        Error::Argument(_) | Error::Lookup(_) | Error::Config { .. } | Error::Resource(_) => DsxStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (DsxStatus, String)>) -> DsxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsxStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DsxStatus::Internal
        }
    }
}

fn lib<T>(r: dirsep::Result<T>) -> Result<T, (DsxStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DsxStatus, String) {
    (DsxStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], (DsxStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (DsxStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dsx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsx_model_load(path: *const c_char, out: *mut *mut DsxModel) -> DsxStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DsxStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = lib(Checkpoint::load(p).and_then(|c| c.to_model()))?;
        *out = Box::into_raw(Box::new(DsxModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Releases a model. Streams created from it stay valid.
///
/// # Safety
/// `model` must come from [`dsx_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dsx_model_free(model: *mut DsxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sector count, samples per streaming chunk, and output delay in samples.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn dsx_model_info(
    model: *const DsxModel,
    n_sectors: *mut u32,
    chunk_samples: *mut u32,
    delay_samples: *mut u32,
) -> DsxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = m.model.config();
        for (p, v) in [
            (n_sectors, cfg.n_sectors),
            (chunk_samples, cfg.chunk_samples()),
            (delay_samples, cfg.lookahead_samples()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v as u32;
            }
        }
        Ok(())
    })
}

/// Offline extraction of `len` samples into `out` (also `len` samples).
///
/// # Safety
/// Input pointers must be valid for `len` reads and `out` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn dsx_infer(
    model: *const DsxModel,
    sector_mask: u32,
    ref_mic: *const f64,
    struct_mic: *const f64,
    len: usize,
    out: *mut f64,
) -> DsxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = slice(ref_mic, len, "ref_mic")?;
        let s = slice(struct_mic, len, "struct_mic")?;
        let o = slice_mut(out, len, "out")?;
        let query = lib(AngleQuery::new(m.model.config().n_sectors, sector_mask))?;
        let audio = lib(AudioBuffer::new(vec![r.to_vec(), s.to_vec()]))?;
        let y = lib(m.model.forward_offline(&audio, &query))?;
        o.copy_from_slice(&y);
        Ok(())
    })
}

/// Starts a stream extracting the sectors in `sector_mask`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsx_stream_new(model: *const DsxModel, sector_mask: u32, out: *mut *mut DsxStream) -> DsxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let query = lib(AngleQuery::new(m.model.config().n_sectors, sector_mask))?;
        let streamer = lib(Streamer::new(Arc::clone(&m.model), &query))?;
        *out = Box::into_raw(Box::new(DsxStream { streamer }));
        Ok(())
    })
}

/// Consumes one chunk per channel and writes one chunk of output, delayed
/// by the model's lookahead. `len` must equal the chunk size and
/// `sector_mask` the stream's query.
///
/// # Safety
/// `stream` must be a live handle; buffers must hold `len` samples.
#[no_mangle]
pub unsafe extern "C" fn dsx_stream_step(
    stream: *mut DsxStream,
    sector_mask: u32,
    ref_mic: *const f64,
    struct_mic: *const f64,
    len: usize,
    out: *mut f64,
) -> DsxStatus {
    guard(|| {
        let st = stream.as_mut().ok_or_else(|| null("stream"))?;
        let r = slice(ref_mic, len, "ref_mic")?;
        let s = slice(struct_mic, len, "struct_mic")?;
        let o = slice_mut(out, len, "out")?;
        let query = lib(AngleQuery::new(st.streamer.model().config().n_sectors, sector_mask))?;
        let y = lib(st.streamer.step(&query, r, s))?;
        o.copy_from_slice(&y);
        Ok(())
    })
}

/// Clears the stream history and switches to `sector_mask`.
///
/// # Safety
/// `stream` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsx_stream_reset(stream: *mut DsxStream, sector_mask: u32) -> DsxStatus {
    guard(|| {
        let st = stream.as_mut().ok_or_else(|| null("stream"))?;
        let query = lib(AngleQuery::new(st.streamer.model().config().n_sectors, sector_mask))?;
        lib(st.streamer.reset(&query))
    })
}

/// # Safety
/// `stream` must come from [`dsx_stream_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dsx_stream_free(stream: *mut DsxStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Scale-invariant SDR of `est` against `reference`, in dB.
///
/// # Safety
/// Both inputs must be valid for `len` reads; `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsx_si_sdr(est: *const f64, reference: *const f64, len: usize, out_db: *mut f64) -> DsxStatus {
    guard(|| {
        let e = slice(est, len, "est")?;
        let r = slice(reference, len, "reference")?;
        let o = out_db.as_mut().ok_or_else(|| null("out_db"))?;
        *o = lib(si_sdr(e, r))?;
        Ok(())
    })
}
