//! C ABI over the adaptation laboratory.
//!
//! Every fallible call returns a [`FredaStatus`]; on failure a per-thread
//! message is retrievable with [`freda_last_error`]. Results travel through
//! opaque handles that the caller frees with [`freda_result_free`]; strings
//! returned to the caller are freed with [`freda_string_free`]. No call
//! panics across the boundary.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use freda_core::checkpoint::Checkpoint;
use freda_core::config::RunConfig;
use freda_core::error::Error;
use freda_core::harness::{run, RunReport};
use freda_core::stream::LabeledDataset;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FredaStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read or written.
    Io = 3,
    /// Malformed file contents.
    Format = 4,
    /// Tensor or batch shape mismatch.
    Shape = 5,
    /// Invalid configuration value (the message names the key).
    Config = 6,
    /// Numeric failure, or a requested quantity is undefined.
    Numeric = 7,
    /// An internal invariant failed; the library state is still sound.
    Panic = 8,
}

/// Opaque handle to a finished adaptation run.
pub struct FredaRunResult {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &Error) -> FredaStatus {
    match e {
        Error::Io(_) => FredaStatus::Io,
        Error::Format(_) => FredaStatus::Format,
        Error::Shape(_) => FredaStatus::Shape,
        Error::InvalidConfig { .. } => FredaStatus::Config,
        Error::Numeric(_) => FredaStatus::Numeric,
    }
}

fn fail(e: &Error) -> FredaStatus {
    set_error(e.to_string());
    status_of(e)
}

/// Runs `f` with panics converted into [`FredaStatus::Panic`].
fn guarded(f: impl FnOnce() -> FredaStatus) -> FredaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic without message".to_string());
            set_error(format!("internal panic: {msg}"));
            FredaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, FredaStatus> {
    if ptr.is_null() {
        set_error(format!("argument `{name}` is null"));
        return Err(FredaStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("argument `{name}` is not valid UTF-8"));
        FredaStatus::InvalidUtf8
    })
}

fn string_out(text: String, out: *mut *mut c_char) -> FredaStatus {
    match CString::new(text.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            FredaStatus::Ok
        }
        Err(e) => {
            set_error(format!("string conversion failed: {e}"));
            FredaStatus::Format
        }
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn freda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread. The pointer stays valid until
/// the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn freda_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Runs one adaptation episode.
///
/// `checkpoint_path` and `dataset_path` name container-format files (the
/// pretrained model and the clean exemplar dataset). `config_json` holds a
/// run configuration in the same JSON schema the CLI accepts; pass null for
/// the default configuration. On success `*out` receives a result handle the
/// caller must free with `freda_result_free`.
///
/// # Safety
/// Pointer arguments must be null or valid; `out` must be non-null and
/// writable.
#[no_mangle]
pub unsafe extern "C" fn freda_run(
    checkpoint_path: *const c_char,
    dataset_path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut FredaRunResult,
) -> FredaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("argument `out` is null".to_string());
            return FredaStatus::NullArgument;
        }
        let ck_path = match utf8_arg(checkpoint_path, "checkpoint_path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let ds_path = match utf8_arg(dataset_path, "dataset_path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            let text = match utf8_arg(config_json, "config_json") {
                Ok(s) => s,
                Err(status) => return status,
            };
            match RunConfig::from_json(text) {
                Ok(cfg) => cfg,
                Err(e) => return fail(&e),
            }
        };
        let checkpoint = match Checkpoint::load(Path::new(ck_path)) {
            Ok(ck) => ck,
            Err(e) => return fail(&e),
        };
        let dataset = match LabeledDataset::load(Path::new(ds_path)) {
            Ok(ds) => ds,
            Err(e) => return fail(&e),
        };
        match run(&checkpoint, &dataset, &cfg) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(FredaRunResult { report }));
                FredaStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// JSON report of a finished run (config echo, error rates, step traces).
/// The caller frees `*out` with `freda_string_free`.
///
/// # Safety
/// `result` must come from `freda_run`; `out` must be non-null and writable.
#[no_mangle]
pub unsafe extern "C" fn freda_result_report_json(
    result: *const FredaRunResult,
    out: *mut *mut c_char,
) -> FredaStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_error("argument `result` or `out` is null".to_string());
            return FredaStatus::NullArgument;
        }
        match (*result).report.to_json() {
            Ok(text) => string_out(text, out),
            Err(e) => fail(&e),
        }
    })
}

/// Per-sample CSV (`index,true_label,predicted,cluster,domain,entropy`).
/// The caller frees `*out` with `freda_string_free`.
///
/// # Safety
/// `result` must come from `freda_run`; `out` must be non-null and writable.
#[no_mangle]
pub unsafe extern "C" fn freda_result_samples_csv(
    result: *const FredaRunResult,
    out: *mut *mut c_char,
) -> FredaStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_error("argument `result` or `out` is null".to_string());
            return FredaStatus::NullArgument;
        }
        string_out((*result).report.csv(), out)
    })
}

/// Overall error rate of the run. Fails with `Numeric` when the stream was
/// empty (the rate is undefined, not zero).
///
/// # Safety
/// `result` must come from `freda_run`; `out` must be non-null and writable.
#[no_mangle]
pub unsafe extern "C" fn freda_result_overall_error(
    result: *const FredaRunResult,
    out: *mut f64,
) -> FredaStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_error("argument `result` or `out` is null".to_string());
            return FredaStatus::NullArgument;
        }
        match (*result).report.overall_error {
            Some(err) => {
                *out = err;
                FredaStatus::Ok
            }
            None => {
                set_error("overall error is undefined for an empty stream".to_string());
                FredaStatus::Numeric
            }
        }
    })
}

/// Number of stream samples the run consumed.
///
/// # Safety
/// `result` must come from `freda_run`; `out` must be non-null and writable.
#[no_mangle]
pub unsafe extern "C" fn freda_result_stream_length(
    result: *const FredaRunResult,
    out: *mut usize,
) -> FredaStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_error("argument `result` or `out` is null".to_string());
            return FredaStatus::NullArgument;
        }
        *out = (*result).report.stream_length;
        FredaStatus::Ok
    })
}

/// Frees a result handle. Null is a no-op.
///
/// # Safety
/// `result` must be null or a handle from `freda_run`, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn freda_result_free(result: *mut FredaRunResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn freda_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
