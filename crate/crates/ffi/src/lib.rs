//! C ABI: opaque handles, status codes, and a per-thread last-error
//! message. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sleepyco::augment::filter::band_stop;
use sleepyco::eval::{compute_metrics, ConfusionMatrix};
use sleepyco::model::{Model, ModelConfig};
use sleepyco::signal::edf::read_edf;
use sleepyco::signal::{Recording, EPOCH_SAMPLES};
use sleepyco::tensor::{Graph, Tensor};
use sleepyco::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SleepycoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    Data = 7,
    NonFinite = 8,
    Panic = 9,
}

/// A model ready for prediction.
pub struct SleepycoModel {
    model: Model,
}

/// A decoded signal channel.
pub struct SleepycoSignal {
    rec: Recording,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SleepycoMetrics {
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    /// Stage order W, N1, N2, N3, REM.
    pub per_class_f1: [f64; 5],
    pub per_class_precision: [f64; 5],
    pub per_class_recall: [f64; 5],
    pub p_e: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (SleepycoStatus, String);

fn status_of(e: &Error) -> SleepycoStatus {
    match e {
        Error::Shape { .. } => SleepycoStatus::ShapeMismatch,
        Error::NonFinite(_) => SleepycoStatus::NonFinite,
        Error::Io { .. } => SleepycoStatus::Io,
        Error::Checkpoint(_) | Error::CheckpointMismatch { .. } => SleepycoStatus::Checkpoint,
        Error::Config { .. } | Error::Json(_) => SleepycoStatus::Config,
        Error::InvalidArgument { .. } => SleepycoStatus::InvalidArgument,
        _ => SleepycoStatus::Data,
    }
}

fn core(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> Failure {
    (SleepycoStatus::NullPointer, format!("`{what}` is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    (SleepycoStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code and the
/// thread's last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SleepycoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SleepycoStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SleepycoStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_config(json: *const c_char) -> Result<ModelConfig, Failure> {
    let cfg: ModelConfig = if json.is_null() {
        ModelConfig::default()
    } else {
        serde_json::from_str(str_arg(json, "config_json")?).map_err(|e| (SleepycoStatus::Config, e.to_string()))?
    };
    cfg.validate().map_err(core)?;
    Ok(cfg)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sleepyco_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sleepyco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Freshly initialized model. `config_json` is a model configuration
/// object (NULL for defaults).
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_model_new(config_json: *const c_char, seed: u64, out: *mut *mut SleepycoModel) -> SleepycoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::new(model_config(config_json)?, seed).map_err(core)?;
        *out = Box::into_raw(Box::new(SleepycoModel { model }));
        Ok(())
    })
}

/// Model with the sequence weights of a checkpoint manifest at `path`.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `path` is a
/// NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_model_load(
    config_json: *const c_char,
    path: *const c_char,
    out: *mut *mut SleepycoModel,
) -> SleepycoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let mut model = Model::new(model_config(config_json)?, 0).map_err(core)?;
        let (tensors, _) = sleepyco::tensor::checkpoint::load(Path::new(path)).map_err(core)?;
        model
            .store
            .restore_where(sleepyco::model::is_sequence_model_param, &tensors)
            .map_err(core)?;
        *out = Box::into_raw(Box::new(SleepycoModel { model }));
        Ok(())
    })
}

/// Samples per input sequence: 3000 times the sequence length.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_model_sequence_samples(model: *const SleepycoModel, out: *mut usize) -> SleepycoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.cfg.seq_len * EPOCH_SAMPLES;
        Ok(())
    })
}

/// Stage of the last epoch of each of `n_sequences` back-to-back
/// sequences (0 = W, 1 = N1, 2 = N2, 3 = N3, 4 = REM). Running
/// normalization statistics must be present in the model.
///
/// # Safety
/// `model` is a live handle; `samples` holds `n_sequences` times
/// [`sleepyco_model_sequence_samples`] values; `stages` has room for
/// `n_sequences` entries.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_model_predict(
    model: *const SleepycoModel,
    samples: *const f64,
    n_sequences: usize,
    stages: *mut u32,
) -> SleepycoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n_sequences == 0 {
            return Err(invalid("n_sequences must be at least 1"));
        }
        let per = m.model.cfg.seq_len * EPOCH_SAMPLES;
        let x = slice_arg(samples, n_sequences * per, "samples")?;
        let out = slice_out(stages, n_sequences, "stages")?;
        let t = Tensor::new(vec![n_sequences, 1, per], x.to_vec()).map_err(core)?;
        let preds = m.model.predict(&t).map_err(core)?;
        for (o, p) in out.iter_mut().zip(preds) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_model_free(model: *mut SleepycoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Agreement metrics of a row-major 5×5 confusion matrix (rows actual).
///
/// # Safety
/// `counts` holds 25 values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_metrics(counts: *const u64, out: *mut SleepycoMetrics) -> SleepycoStatus {
    guard(|| {
        let c = slice_arg(counts, 25, "counts")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cm = ConfusionMatrix::default();
        for (i, row) in cm.counts.iter_mut().enumerate() {
            row.copy_from_slice(&c[i * 5..(i + 1) * 5]);
        }
        let r = compute_metrics(&cm).map_err(core)?;
        *out = SleepycoMetrics {
            acc: r.acc,
            mf1: r.mf1,
            kappa: r.kappa,
            per_class_f1: r.per_class_f1,
            per_class_precision: r.per_class_precision,
            per_class_recall: r.per_class_recall,
            p_e: r.p_e,
        };
        Ok(())
    })
}

/// Supervised contrastive loss of `n` row-major `d`-dimensional
/// embeddings, summed over anchors; `no_positive` receives the number of
/// anchors that had no positive (may be NULL).
///
/// # Safety
/// `z` holds `n * d` values, `labels` holds `n`; `loss` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_supcon_loss(
    z: *const f64,
    n: usize,
    d: usize,
    labels: *const u32,
    tau: f64,
    loss: *mut f64,
    no_positive: *mut usize,
) -> SleepycoStatus {
    guard(|| {
        let zs = slice_arg(z, n * d, "z")?;
        let ls = slice_arg(labels, n, "labels")?;
        if loss.is_null() {
            return Err(null("loss"));
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![n, d], zs.to_vec()).map_err(core)?);
        let labels: Vec<usize> = ls.iter().map(|&l| l as usize).collect();
        let (l, missing) = g.supcon_loss(zv, &labels, tau).map_err(core)?;
        *loss = g.value(l).item();
        if !no_positive.is_null() {
            *no_positive = missing;
        }
        Ok(())
    })
}

/// Zero-phase band-stop filter of `n` samples at `fs` Hz removing
/// `[lower_hz, lower_hz + width_hz]`; `out` may alias `x`.
///
/// # Safety
/// `x` and `out` hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_band_stop(
    x: *const f64,
    n: usize,
    lower_hz: f64,
    width_hz: f64,
    fs: f64,
    out: *mut f64,
) -> SleepycoStatus {
    guard(|| {
        let input = slice_arg(x, n, "x")?.to_vec();
        let y = band_stop(&input, lower_hz, width_hz, fs).map_err(core)?;
        slice_out(out, n, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Decodes channel `channel` of an EDF file held in memory.
///
/// # Safety
/// `bytes` holds `len` bytes; `channel` is NUL-terminated; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_edf_read(
    bytes: *const u8,
    len: usize,
    channel: *const c_char,
    out: *mut *mut SleepycoSignal,
) -> SleepycoStatus {
    guard(|| {
        let b = slice_arg(bytes, len, "bytes")?;
        let ch = str_arg(channel, "channel")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rec = read_edf(b, ch, "ffi").map_err(core)?;
        *out = Box::into_raw(Box::new(SleepycoSignal { rec }));
        Ok(())
    })
}

/// # Safety
/// `signal` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_signal_len(signal: *const SleepycoSignal, out: *mut usize) -> SleepycoStatus {
    guard(|| {
        let s = signal.as_ref().ok_or_else(|| null("signal"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.rec.samples.len();
        Ok(())
    })
}

/// # Safety
/// `signal` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_signal_sample_rate(signal: *const SleepycoSignal, out: *mut f64) -> SleepycoStatus {
    guard(|| {
        let s = signal.as_ref().ok_or_else(|| null("signal"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.rec.sample_rate;
        Ok(())
    })
}

/// Copies the physical samples into `out`, which must hold exactly
/// [`sleepyco_signal_len`] values.
///
/// # Safety
/// `signal` is a live handle; `out` holds `cap` values.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_signal_copy(signal: *const SleepycoSignal, out: *mut f64, cap: usize) -> SleepycoStatus {
    guard(|| {
        let s = signal.as_ref().ok_or_else(|| null("signal"))?;
        if cap != s.rec.samples.len() {
            return Err((
                SleepycoStatus::ShapeMismatch,
                format!("buffer holds {cap} values, signal has {}", s.rec.samples.len()),
            ));
        }
        slice_out(out, cap, "out")?.copy_from_slice(&s.rec.samples);
        Ok(())
    })
}

/// Releases a signal; NULL is ignored.
///
/// # Safety
/// `signal` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sleepyco_signal_free(signal: *mut SleepycoSignal) {
    if !signal.is_null() {
        drop(Box::from_raw(signal));
    }
}
