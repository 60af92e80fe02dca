//! C interface for loading a trained style classifier and scoring pages.
//!
//! Every function returns a [`StylekitStatus`]. On failure the message is
//! available from [`stylekit_last_error`] on the same thread until the next
//! call that fails.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stylekit::error::Error;
use stylekit::evaluation::{AnyClassifier, PageClassifier};
use stylekit::image::ImageBuffer;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StylekitStatus {
    Ok = 0,
    /// Null pointer, bad size, or a buffer that is too small.
    InvalidArgument = 1,
    Io = 2,
    /// The file is not a model or is corrupt.
    Decode = 3,
    /// NaN or divergence inside the model.
    Numerical = 4,
    /// Any other library error.
    Internal = 5,
    Panic = 6,
}

/// A loaded classifier. Create with [`stylekit_model_load`], release with
/// [`stylekit_model_free`].
pub struct StylekitModel {
    inner: AnyClassifier,
    classes: Vec<u32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> StylekitStatus {
    match e {
        Error::Io { .. } => StylekitStatus::Io,
        Error::Decode { .. } | Error::Json(_) => StylekitStatus::Decode,
        Error::Invalid(_) | Error::Shape { .. } => StylekitStatus::InvalidArgument,
        e if e.is_numerical() => StylekitStatus::Numerical,
        _ => StylekitStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into a status plus a message.
fn guard(f: impl FnOnce() -> Result<(), (StylekitStatus, String)>) -> StylekitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StylekitStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            StylekitStatus::Panic
        }
    }
}

fn lib(e: Error) -> (StylekitStatus, String) {
    (status_of(&e), e.to_string())
}

fn bad(msg: &str) -> (StylekitStatus, String) {
    (StylekitStatus::InvalidArgument, msg.to_string())
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn stylekit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a network or bag-of-words model from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stylekit_model_load(
    path: *const c_char,
    out: *mut *mut StylekitModel,
) -> StylekitStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(bad("null argument"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| bad("path is not UTF-8"))?;
        let inner = AnyClassifier::load(Path::new(path)).map_err(lib)?;
        let classes = inner.classes();
        unsafe { *out = Box::into_raw(Box::new(StylekitModel { inner, classes })) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`stylekit_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stylekit_model_free(model: *mut StylekitModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of classes the model distinguishes, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stylekit_model_num_classes(model: *const StylekitModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.classes.len())
}

/// Copies the class ids, in confidence order, into `ids[0..len]`.
///
/// # Safety
/// `model` must be a live handle and `ids` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn stylekit_model_class_ids(
    model: *const StylekitModel,
    ids: *mut u32,
    len: usize,
) -> StylekitStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| bad("null model"))?;
        if ids.is_null() || len < m.classes.len() {
            return Err(bad("class id buffer is null or too small"));
        }
        unsafe { std::slice::from_raw_parts_mut(ids, m.classes.len()) }.copy_from_slice(&m.classes);
        Ok(())
    })
}

/// Classifies one page given as interleaved 8-bit RGB, `height * width * 3`
/// bytes, row-major. Writes the predicted class id, and when `confidences`
/// is non-null, one confidence per class in [`stylekit_model_class_ids`]
/// order.
///
/// # Safety
/// `model` must be a live handle, `rgb` must hold `height * width * 3`
/// bytes, `class_id` must be valid, and `confidences` must be null or hold
/// `confidences_len` values.
#[no_mangle]
pub unsafe extern "C" fn stylekit_model_classify(
    model: *const StylekitModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    class_id: *mut u32,
    confidences: *mut f64,
    confidences_len: usize,
) -> StylekitStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| bad("null model"))?;
        if rgb.is_null() || class_id.is_null() {
            return Err(bad("null argument"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(3))
            .filter(|&n| n > 0)
            .ok_or_else(|| bad("empty or oversized image"))?;
        if !confidences.is_null() && confidences_len < m.classes.len() {
            return Err(bad("confidence buffer too small"));
        }
        let bytes = unsafe { std::slice::from_raw_parts(rgb, n) };
        let img = ImageBuffer::from_rgb8(height, width, bytes).map_err(lib)?;
        let (pred, conf) = m.inner.classify(&img).map_err(lib)?;
        unsafe { *class_id = pred };
        if !confidences.is_null() {
            unsafe { std::slice::from_raw_parts_mut(confidences, conf.len()) }
                .copy_from_slice(&conf);
        }
        Ok(())
    })
}
