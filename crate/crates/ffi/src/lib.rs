//! C ABI over the `gconv` library.
//!
//! Models live behind an opaque [`GconvModel`] handle. Every fallible call
//! returns a [`GconvStatus`]; on failure `gconv_last_error` describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gconv::profile::{count_flops, count_params};
use gconv::{build_model, checkpoint, forward, Error, ModelConfig, ModelWeights};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GconvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Dimension = 4,
    Index = 5,
    Validation = 6,
    Numeric = 7,
    Storage = 8,
    Format = 9,
    Corruption = 10,
    Consistency = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Opaque model handle: a config and its weights.
pub struct GconvModel {
    config: ModelConfig,
    weights: ModelWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> GconvStatus {
    match e {
        Error::Dimension(_) => GconvStatus::Dimension,
        Error::Config(_) => GconvStatus::Config,
        Error::Index(_) => GconvStatus::Index,
        Error::Validation(_) => GconvStatus::Validation,
        Error::Numeric { .. } => GconvStatus::Numeric,
        Error::Storage { .. } => GconvStatus::Storage,
        Error::Format(_) => GconvStatus::Format,
        Error::Corruption { .. } => GconvStatus::Corruption,
        Error::Consistency { .. } => GconvStatus::Consistency,
    }
}

struct Fail(GconvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GconvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GconvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GconvStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(GconvStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| Fail(GconvStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const GconvModel) -> Result<&'a GconvModel, Fail> {
    non_null(m, "model")?;
    Ok(&*m)
}

fn emit(out: *mut *mut GconvModel, model: GconvModel) {
    unsafe { *out = Box::into_raw(Box::new(model)) };
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gconv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a seeded model from a preset name (`bert-base`, `squeezebert`, `tiny`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_from_preset(
    name: *const c_char,
    seed: u64,
    out: *mut *mut GconvModel,
) -> GconvStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = ModelConfig::preset(str_arg(name, "name")?)?;
        let weights = build_model(&config, seed)?;
        emit(out, GconvModel { config, weights });
        Ok(())
    })
}

/// Builds a seeded model from `key = value` config text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_from_config_text(
    text: *const c_char,
    seed: u64,
    out: *mut *mut GconvModel,
) -> GconvStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = ModelConfig::from_text(str_arg(text, "text")?)?;
        let weights = build_model(&config, seed)?;
        emit(out, GconvModel { config, weights });
        Ok(())
    })
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_load(path: *const c_char, out: *mut *mut GconvModel) -> GconvStatus {
    guard(|| {
        non_null(out, "out")?;
        let (config, weights) = checkpoint::load(Path::new(str_arg(path, "path")?))?;
        emit(out, GconvModel { config, weights });
        Ok(())
    })
}

/// Writes a checkpoint file; `bytes_written` may be null.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_save(
    model: *const GconvModel,
    path: *const c_char,
    bytes_written: *mut u64,
) -> GconvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let n = checkpoint::save(&m.config, &m.weights, Path::new(str_arg(path, "path")?))?;
        if !bytes_written.is_null() {
            *bytes_written = n;
        }
        Ok(())
    })
}

/// Inference forward pass over `len` tokens. `segment_ids` and `visible`
/// may be null (all segment 0, all positions visible). Writes
/// `num_classes` logits into `logits` and their count into `logits_len`.
///
/// # Safety
/// Non-null array arguments must point to `len` readable elements;
/// `logits` must have room for `logits_cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_forward(
    model: *const GconvModel,
    token_ids: *const usize,
    segment_ids: *const usize,
    visible: *const bool,
    len: usize,
    logits: *mut f64,
    logits_cap: usize,
    logits_len: *mut usize,
) -> GconvStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(token_ids, "token_ids")?;
        non_null(logits, "logits")?;
        non_null(logits_len, "logits_len")?;
        if len == 0 {
            return Err(Fail(GconvStatus::Dimension, "len must be at least 1".into()));
        }
        let tokens = std::slice::from_raw_parts(token_ids, len);
        let segments =
            if segment_ids.is_null() { vec![0; len] } else { std::slice::from_raw_parts(segment_ids, len).to_vec() };
        let mask = (!visible.is_null()).then(|| std::slice::from_raw_parts(visible, len));
        let out = forward(&m.weights, tokens, &segments, mask)?;
        *logits_len = out.len();
        if logits_cap < out.len() {
            return Err(Fail(
                GconvStatus::BufferTooSmall,
                format!("need {} logits, buffer holds {logits_cap}", out.len()),
            ));
        }
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, out.len());
        Ok(())
    })
}

/// Number of logits the model produces.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_num_classes(model: *const GconvModel, out: *mut usize) -> GconvStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        *out = m.config.num_classes;
        Ok(())
    })
}

/// Closed-form parameter count.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_count_params(model: *const GconvModel, out: *mut u64) -> GconvStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        *out = count_params(&m.config)?.total;
        Ok(())
    })
}

/// Analytic multiply-accumulate count and GFLOPs (2 FLOPs per MAC) at `seq_len`.
/// Either output may be null.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_count_flops(
    model: *const GconvModel,
    seq_len: usize,
    total_macs: *mut u64,
    gflops: *mut f64,
) -> GconvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = count_flops(&m.config, seq_len)?;
        if !total_macs.is_null() {
            *total_macs = r.total_macs;
        }
        if !gflops.is_null() {
            *gflops = r.gflops;
        }
        Ok(())
    })
}

/// Releases a model. Null is accepted and ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gconv_model_free(model: *mut GconvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
