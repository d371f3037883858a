//! C interface to `noisebench`.
//!
//! Handles are opaque pointers released with their matching `*_free`
//! function. Every fallible call returns an [`NbStatus`]; on failure the
//! message is kept per thread and read with [`nb_last_error_message`].
//! Panics never cross the boundary and are reported as `NB_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use noisebench::checkpoint::load_model;
use noisebench::experiment::{cmd_ood, cmd_train, ExperimentConfig, OutputOptions};
use noisebench::metrics::{ece, kendall_tau};
use noisebench::nn::{softmax, MlpModel};
use noisebench::tensor::Tensor;
use noisebench::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NbStatus {
    NbOk = 0,
    /// A required pointer argument was null.
    NbNullPointer = 1,
    /// Bad input: config, schema, parameter or shape.
    NbInvalidInput = 2,
    /// A computation failed (divergence, calibration, study).
    NbRuntime = 3,
    /// File system or parse failure.
    NbIo = 4,
    /// Output buffer too small.
    NbBufferTooSmall = 5,
    NbPanic = 6,
}

/// A trained network loaded from a checkpoint.
pub struct NbModel {
    inner: MlpModel,
}

/// A parsed experiment configuration.
pub struct NbConfig {
    inner: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NbStatus {
    match e {
        Error::Io { .. } | Error::Json(_) | Error::Csv(_) => NbStatus::NbIo,
        e if e.is_validation() => NbStatus::NbInvalidInput,
        Error::Dimension(_) => NbStatus::NbInvalidInput,
        _ => NbStatus::NbRuntime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (NbStatus, String)>) -> NbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NbStatus::NbOk,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NbStatus::NbPanic
        }
    }
}

fn lib(e: Error) -> (NbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (NbStatus, String) {
    (NbStatus::NbNullPointer, format!("`{name}` is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (NbStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (NbStatus::NbInvalidInput, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (NbStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in
/// bytes, or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nb_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_model_load(path: *const c_char, out: *mut *mut NbModel) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let inner = load_model(&path).map_err(lib)?;
        *out = Box::into_raw(Box::new(NbModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`nb_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nb_model_free(model: *mut NbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input features, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_model_input_dim(model: *const NbModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Width of the raw output: the class count, or two values (mean and
/// log-variance) per regression target.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_model_output_dim(model: *const NbModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// Runs the network on `rows` row-major inputs of `cols` features and
/// writes `rows * output_dim` values to `out`. Classification outputs are
/// softmax probabilities; regression outputs are raw mean and log-variance
/// pairs in normalised units.
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` must have room for
/// `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn nb_model_predict(
    model: *const NbModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> NbStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let data = slice_arg(x, rows * cols, "x")?;
        let input = Tensor::from_vec(rows, cols, data.to_vec()).map_err(lib)?;
        let mut y = m.predict(&input).map_err(lib)?;
        if m.task().is_classification() {
            y = softmax(&y);
        }
        if out_len < y.len() {
            return Err((
                NbStatus::NbBufferTooSmall,
                format!("output needs {} values, buffer holds {out_len}", y.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(y.data().as_ptr(), out, y.len());
        Ok(())
    })
}

/// Parses and validates an experiment config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_config_load(path: *const c_char, out: *mut *mut NbConfig) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let inner = ExperimentConfig::load(&path).map_err(lib)?;
        *out = Box::into_raw(Box::new(NbConfig { inner }));
        Ok(())
    })
}

/// Releases a config. Null is ignored.
///
/// # Safety
/// `config` must come from [`nb_config_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nb_config_free(config: *mut NbConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Replaces the config's seed list.
///
/// # Safety
/// `config` must be a live handle and `seeds` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn nb_config_set_seeds(config: *mut NbConfig, seeds: *const u64, n: usize) -> NbStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        let s = slice_arg(seeds, n, "seeds")?;
        if s.is_empty() {
            return Err((NbStatus::NbInvalidInput, "at least one seed is required".into()));
        }
        c.inner.seeds = s.to_vec();
        Ok(())
    })
}

unsafe fn output(out_dir: *const c_char, force: bool) -> Result<OutputOptions, (NbStatus, String)> {
    Ok(OutputOptions {
        out: path_arg(out_dir, "out_dir")?,
        force,
    })
}

/// Equivalent of `noisebench train`.
///
/// # Safety
/// `config` must be a live handle; `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nb_train(config: *const NbConfig, out_dir: *const c_char, force: bool) -> NbStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        cmd_train(&c.inner, &output(out_dir, force)?).map_err(lib)?;
        Ok(())
    })
}

/// Equivalent of `noisebench ood`.
///
/// # Safety
/// `config` must be a live handle; `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nb_generate_ood(config: *const NbConfig, out_dir: *const c_char, force: bool) -> NbStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        cmd_ood(&c.inner, &output(out_dir, force)?).map_err(lib)?;
        Ok(())
    })
}

/// Expected calibration error in percent of `rows` probability rows with
/// `classes` entries each.
///
/// # Safety
/// `probs` must hold `rows * classes` values, `labels` `rows` values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_ece(
    probs: *const f64,
    rows: usize,
    classes: usize,
    labels: *const u32,
    bins: usize,
    out: *mut f64,
) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = slice_arg(probs, rows * classes, "probs")?;
        let l: Vec<usize> = slice_arg(labels, rows, "labels")?.iter().map(|&v| v as usize).collect();
        let t = Tensor::from_vec(rows, classes, p.to_vec()).map_err(lib)?;
        *out = ece(&t, &l, bins).map_err(lib)?;
        Ok(())
    })
}

/// Tie-corrected Kendall tau between two score lists of length `n`.
///
/// # Safety
/// `a` and `b` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_kendall_tau(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> NbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = slice_arg(a, n, "a")?;
        let b = slice_arg(b, n, "b")?;
        *out = kendall_tau(a, b).map_err(lib)?;
        Ok(())
    })
}
