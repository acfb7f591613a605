//! C interface to the cryalert classifier.
//!
//! Every function returns a [`CryStatus`] or a value with a documented
//! sentinel; on failure the message is available from
//! [`cry_last_error_message`] on the calling thread. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cryalert::alert::AlertPolicy;
use cryalert::wav_io::{read_wav_file, AudioClip};
use cryalert::{Error, Model};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CryStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Unsupported = 5,
    NotAModel = 6,
    Version = 7,
    Corrupt = 8,
    TooShort = 9,
    Config = 10,
    Internal = 11,
}

/// A loaded model. Immutable once loaded, so one handle may be shared
/// between threads.
pub struct CryModel {
    model: Model,
    class_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CryStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => CryStatus::Io,
            Error::Format(_) => CryStatus::Format,
            Error::UnsupportedCodec(_) | Error::UnsupportedBitDepth(_) | Error::UnsupportedRatio { .. } => {
                CryStatus::Unsupported
            }
            Error::TooShort { .. } => CryStatus::TooShort,
            Error::NotAModel => CryStatus::NotAModel,
            Error::Version { .. } => CryStatus::Version,
            Error::Corrupt { .. } | Error::Model(_) => CryStatus::Corrupt,
            Error::Config(_) | Error::Dataset(_) | Error::Label { .. } => CryStatus::Config,
            Error::Shape(_) | Error::Size(_) => CryStatus::InvalidArgument,
            _ => CryStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CryStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error message, and turns panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CryStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CryStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CryStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    if path.is_null() {
        return Err(fail(CryStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(CryStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn model_arg<'a>(model: *const CryModel) -> Result<&'a CryModel, Failure> {
    model
        .as_ref()
        .ok_or_else(|| fail(CryStatus::NullPointer, "model is null"))
}

unsafe fn write_probs(model: &CryModel, clip: &AudioClip, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(CryStatus::NullPointer, "output buffer is null"));
    }
    let n = model.class_names.len();
    if out_len < n {
        return Err(fail(
            CryStatus::InvalidArgument,
            format!("output buffer holds {out_len} values, model has {n} classes"),
        ));
    }
    let prediction = model.model.predict(clip)?;
    std::slice::from_raw_parts_mut(out, n).copy_from_slice(&prediction.probabilities);
    Ok(())
}

/// Loads a model file. On success `*out` owns a handle to release with
/// `cry_model_free`; on failure it is set to NULL.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cry_model_load(path: *const c_char, out: *mut *mut CryModel) -> CryStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CryStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let model = Model::load(path_arg(path)?)?;
        let class_names = model
            .class_names
            .iter()
            .map(|n| CString::new(n.as_str()).map_err(|_| fail(CryStatus::Corrupt, "class name contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(CryModel { model, class_names }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from `cry_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cry_model_free(model: *mut CryModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a NULL model.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cry_model_class_count(model: *const CryModel) -> usize {
    model.as_ref().map_or(0, |m| m.class_names.len())
}

/// Name of class `index`, owned by the model, or NULL when out of range.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cry_model_class_name(model: *const CryModel, index: usize) -> *const c_char {
    match model.as_ref().and_then(|m| m.class_names.get(index)) {
        Some(name) => name.as_ptr(),
        None => ptr::null(),
    }
}

/// Classifies mono samples in [-1, 1] at `sample_rate` Hz. Writes one
/// probability per class, in class-index order, into `probs`.
///
/// # Safety
/// `samples` must point to `len` floats and `probs` to `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cry_predict_samples(
    model: *const CryModel,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    probs: *mut f64,
    probs_len: usize,
) -> CryStatus {
    guard(|| {
        let model = model_arg(model)?;
        if samples.is_null() {
            return Err(fail(CryStatus::NullPointer, "samples is null"));
        }
        let data = std::slice::from_raw_parts(samples, len).to_vec();
        let clip = AudioClip::new(data, sample_rate)?;
        write_probs(model, &clip, probs, probs_len)
    })
}

/// Like `cry_predict_samples`, reading a 16-bit PCM WAV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `probs` point to `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cry_predict_wav(
    model: *const CryModel,
    path: *const c_char,
    probs: *mut f64,
    probs_len: usize,
) -> CryStatus {
    guard(|| {
        let model = model_arg(model)?;
        let clip = read_wav_file(path_arg(path)?)?;
        write_probs(model, &clip, probs, probs_len)
    })
}

/// Classifies a WAV file and renders the alert event as one line of JSON.
/// `*json_out` must be released with `cry_string_free`.
///
/// # Safety
/// `alert_classes` must point to `alert_class_count` NUL-terminated strings;
/// `path` must be NUL-terminated and `json_out` valid.
#[no_mangle]
pub unsafe extern "C" fn cry_classify_wav_json(
    model: *const CryModel,
    path: *const c_char,
    alert_classes: *const *const c_char,
    alert_class_count: usize,
    threshold: f64,
    json_out: *mut *mut c_char,
) -> CryStatus {
    guard(|| {
        if json_out.is_null() {
            return Err(fail(CryStatus::NullPointer, "json_out is null"));
        }
        *json_out = ptr::null_mut();
        let model = model_arg(model)?;
        let path = path_arg(path)?;
        if alert_classes.is_null() && alert_class_count > 0 {
            return Err(fail(CryStatus::NullPointer, "alert_classes is null"));
        }
        let mut names = Vec::with_capacity(alert_class_count);
        for i in 0..alert_class_count {
            names.push(path_arg(*alert_classes.add(i))?.to_string());
        }
        let policy = AlertPolicy::new(&model.model.class_names, &names, threshold)?;
        let prediction = model.model.predict(&read_wav_file(path)?)?;
        let json = policy.decide(&prediction, path)?.to_json();
        *json_out = CString::new(json)
            .map_err(|_| fail(CryStatus::Internal, "JSON contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cry_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn cry_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cry_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
