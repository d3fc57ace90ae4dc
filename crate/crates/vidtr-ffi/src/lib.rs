//! C ABI over the vidtr library: opaque model handles, integer status
//! codes and a per-thread error message. The matching header is generated
//! into `include/vidtr.h` at build time.
//!
//! Ownership rules: every `*mut VidtrModel` produced by a build or load
//! call belongs to the caller and must go back through
//! `vidtr_model_free`. Strings returned by `vidtr_last_error_message`
//! stay valid until the next vidtr call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vidtr::model::{Model, ModelConfig};
use vidtr::tensor::Tensor;
use vidtr::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VidtrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad configuration value, unknown preset or wrong buffer size.
    InvalidArgument = 2,
    /// The operation is not defined for this model.
    Unsupported = 3,
    /// A checkpoint file failed to parse or did not match its config.
    Corrupt = 4,
    /// The underlying file could not be read or written.
    Io = 5,
    /// Unexpected internal failure.
    Internal = 6,
}

/// Opaque model handle.
pub struct VidtrModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
}

fn fail(status: VidtrStatus, msg: &str) -> VidtrStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> VidtrStatus {
    match err {
        Error::Config(_) => VidtrStatus::InvalidArgument,
        Error::Unsupported(_) => VidtrStatus::Unsupported,
        Error::CorruptHeader(_)
        | Error::Truncated { .. }
        | Error::CheckpointShape { .. }
        | Error::CheckpointMismatch(_) => VidtrStatus::Corrupt,
        Error::Io(_) => VidtrStatus::Io,
        _ => VidtrStatus::Internal,
    }
}

fn guarded(f: impl FnOnce() -> VidtrStatus) -> VidtrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(VidtrStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, VidtrStatus> {
    if ptr.is_null() {
        return Err(fail(VidtrStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail(
            VidtrStatus::InvalidArgument,
            &format!("{what} is not valid UTF-8"),
        )
    })
}

/// Message describing the most recent failure on this thread; empty
/// string if the last call succeeded. The pointer stays valid until the
/// next vidtr call on the same thread.
#[no_mangle]
pub extern "C" fn vidtr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a model from a named preset (`toy`, `vidtr-s`, `vidtr-m`,
/// `vidtr-l`, `c-vidtr-s`, `c-vidtr-m`) with seeded deterministic
/// initialization, writing the new handle through `out`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_build_preset(
    name: *const c_char,
    seed: u64,
    out: *mut *mut VidtrModel,
) -> VidtrStatus {
    guarded(|| {
        if out.is_null() {
            return fail(VidtrStatus::NullPointer, "out is null");
        }
        let name = match read_str(name, "preset name") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let config = match ModelConfig::preset(name) {
            Ok(c) => c,
            Err(e) => return fail(status_of(&e), &e.to_string()),
        };
        match Model::build(config, seed) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(VidtrModel { inner: model }));
                set_error("");
                VidtrStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Loads a checkpoint written by `vidtr_model_save` (or the CLI).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_load(
    path: *const c_char,
    out: *mut *mut VidtrModel,
) -> VidtrStatus {
    guarded(|| {
        if out.is_null() {
            return fail(VidtrStatus::NullPointer, "out is null");
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match Model::load(Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(VidtrModel { inner: model }));
                set_error("");
                VidtrStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from a vidtr build/load call; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_save(
    model: *const VidtrModel,
    path: *const c_char,
) -> VidtrStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail(VidtrStatus::NullPointer, "model is null");
        };
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match model.inner.save(Path::new(path)) {
            Ok(()) => {
                set_error("");
                VidtrStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call, and
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_free(model: *mut VidtrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frames per input clip; 0 if the handle is null.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_clip_len(model: *const VidtrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.config().clip_len as u64)
}

/// Input frame width in pixels; 0 if the handle is null.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_frame_width(model: *const VidtrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.config().frame_w as u64)
}

/// Input frame height in pixels; 0 if the handle is null.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_frame_height(model: *const VidtrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.config().frame_h as u64)
}

/// Input channels per frame; 0 if the handle is null.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_channels(model: *const VidtrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.config().channels as u64)
}

/// Number of output classes; 0 if the handle is null.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_class_count(model: *const VidtrModel) -> u64 {
    model
        .as_ref()
        .map_or(0, |m| m.inner.config().class_count as u64)
}

/// Total learnable parameter count; 0 if the handle is null.
///
/// # Safety
/// `model` must be null or a handle from a vidtr build/load call.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_param_count(model: *const VidtrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.param_count() as u64)
}

/// Runs one forward pass. `clip` holds channels x frames x width x height
/// values in row-major order (exactly `vidtr_model_channels * clip_len *
/// frame_width * frame_height` floats); `logits` receives
/// `vidtr_model_class_count` values.
///
/// # Safety
/// `model` must come from a vidtr build/load call; `clip` and `logits`
/// must point to buffers of at least `clip_len`/`logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vidtr_model_forward(
    model: *const VidtrModel,
    clip: *const f32,
    clip_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> VidtrStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail(VidtrStatus::NullPointer, "model is null");
        };
        if clip.is_null() || logits.is_null() {
            return fail(VidtrStatus::NullPointer, "clip or logits is null");
        }
        let cfg = model.inner.config();
        let want: usize = cfg.geom().clip_shape().iter().product();
        if clip_len != want {
            return fail(
                VidtrStatus::InvalidArgument,
                &format!("clip has {clip_len} values, geometry needs {want}"),
            );
        }
        if logits_len != cfg.class_count {
            return fail(
                VidtrStatus::InvalidArgument,
                &format!(
                    "logits buffer holds {logits_len} values, model emits {}",
                    cfg.class_count
                ),
            );
        }
        let data: Vec<f64> = std::slice::from_raw_parts(clip, clip_len)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let tensor = match Tensor::new(cfg.geom().clip_shape(), data) {
            Ok(t) => t,
            Err(e) => return fail(status_of(&e), &e.to_string()),
        };
        match model.inner.forward(&tensor) {
            Ok(out) => {
                let dst = std::slice::from_raw_parts_mut(logits, logits_len);
                for (d, &v) in dst.iter_mut().zip(out.logits.data()) {
                    *d = v as f32;
                }
                set_error("");
                VidtrStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}
