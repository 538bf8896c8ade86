//! C interface to `fisher-probe`.
//!
//! Every function returns an [`FpStatus`]. On failure the message for the
//! calling thread is available from [`fp_last_error_message`]. Models are
//! opaque [`FpModel`] handles released with [`fp_model_free`]. A handle may
//! be shared between threads for scoring.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fisher_probe::data::{load_embeddings, Example};
use fisher_probe::models::load_checkpoint;
use fisher_probe::probe::histogram_overlap;
use fisher_probe::{lambda_max, Classifier, Error, FimResult};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidInput = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded classifier and its embedding table.
pub struct FpModel {
    clf: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> FpStatus {
    match e {
        Error::Io { .. } => FpStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Checkpoint(_) => FpStatus::Parse,
        Error::NonFinite(_) | Error::NoConvergence(_) | Error::NotPositiveDefinite => {
            FpStatus::Numeric
        }
        _ => FpStatus::InvalidInput,
    }
}

struct Fail(FpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn write_result(
    r: &FimResult,
    lambda: *mut f64,
    prediction: *mut usize,
    probs: *mut f64,
    probs_len: usize,
) -> Result<(), Fail> {
    if lambda.is_null() {
        return Err(null("lambda_max"));
    }
    if !probs.is_null() {
        if probs_len < r.probs.len() {
            return Err(Fail(
                FpStatus::BufferTooSmall,
                format!("probs holds {probs_len} values, model has {} classes", r.probs.len()),
            ));
        }
        std::slice::from_raw_parts_mut(probs, r.probs.len()).copy_from_slice(&r.probs);
    }
    *lambda = r.lambda_max;
    if !prediction.is_null() {
        *prediction = r.prediction;
    }
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint. `embeddings` may be NULL for point models and is
/// required for text models. On success `*out` owns a new handle.
///
/// # Safety
/// `checkpoint` and non-NULL `embeddings` must be NUL-terminated strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_model_load(
    checkpoint: *const c_char,
    embeddings: *const c_char,
    out: *mut *mut FpModel,
) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(Path::new(str_arg(checkpoint, "checkpoint")?))?;
        let table = if embeddings.is_null() {
            None
        } else {
            Some(load_embeddings(Path::new(str_arg(embeddings, "embeddings")?))?)
        };
        let clf = Classifier::new(model, table)?;
        *out = Box::into_raw(Box::new(FpModel { clf }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`fp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fp_model_free(model: *mut FpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fp_model_num_classes(model: *const FpModel, out: *mut usize) -> FpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.clf.model().num_classes();
        Ok(())
    })
}

/// Scores a text. `prediction` and `probs` may be NULL; a non-NULL
/// `probs` must hold at least as many values as the model has classes.
///
/// # Safety
/// `model` must be a live handle, `text` a NUL-terminated string and
/// `probs` valid for `probs_len` writes.
#[no_mangle]
pub unsafe extern "C" fn fp_score_text(
    model: *const FpModel,
    text: *const c_char,
    lambda_max_out: *mut f64,
    prediction: *mut usize,
    probs: *mut f64,
    probs_len: usize,
) -> FpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let text = str_arg(text, "text")?;
        let r = lambda_max(&m.clf, &Example::text("ffi", text, 0))?;
        write_result(&r, lambda_max_out, prediction, probs, probs_len)
    })
}

/// Scores a feature vector of length `len`. Output arguments as for
/// [`fp_score_text`].
///
/// # Safety
/// `point` must be valid for `len` reads; other pointers as for
/// [`fp_score_text`].
#[no_mangle]
pub unsafe extern "C" fn fp_score_point(
    model: *const FpModel,
    point: *const f64,
    len: usize,
    lambda_max_out: *mut f64,
    prediction: *mut usize,
    probs: *mut f64,
    probs_len: usize,
) -> FpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if point.is_null() {
            return Err(null("point"));
        }
        let x = std::slice::from_raw_parts(point, len).to_vec();
        let r = lambda_max(&m.clf, &Example::point("ffi", x, 0))?;
        write_result(&r, lambda_max_out, prediction, probs, probs_len)
    })
}

/// Percentage overlap of two samples' histograms over a shared range.
///
/// # Safety
/// `a` and `b` must be valid for `a_len` and `b_len` reads; `out_percent`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fp_histogram_overlap(
    a: *const f64,
    a_len: usize,
    b: *const f64,
    b_len: usize,
    bins: usize,
    out_percent: *mut f64,
) -> FpStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out_percent.is_null() {
            return Err(null("sample or output"));
        }
        let report = histogram_overlap(
            std::slice::from_raw_parts(a, a_len),
            std::slice::from_raw_parts(b, b_len),
            bins,
        )?;
        *out_percent = report.overlap_percent;
        Ok(())
    })
}
