//! C ABI over the contraspeech toolkit.
//!
//! Every fallible function returns a [`CsStatus`]; on failure the message is
//! available from [`cs_last_error_message`] on the same thread. Objects are
//! opaque handles released with their matching `*_free` function. Panics are
//! caught at the boundary and reported as `CsStatus::Internal`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use contraspeech::asr::{greedy_decode, CtcLattice};
use contraspeech::cli::Representation;
use contraspeech::diagnostics::{linear_dimensionality, pca_fit, pca_transform, PcaModel};
use contraspeech::{Error, FeatureMatrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    InsufficientData = 6,
    Alignment = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Row-major feature matrix.
pub struct CsFeatures(FeatureMatrix);

/// Fitted PCA model.
pub struct CsPcaModel(PcaModel);

/// Pretrained representation model (cpc or masked).
pub struct CsRepresentation {
    model: Representation,
    rate: f64,
    width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CsStatus {
    match e {
        Error::Io { .. } => CsStatus::Io,
        Error::Format { .. } => CsStatus::Format,
        Error::Dimension(_) | Error::InputTooShort { .. } => CsStatus::Dimension,
        Error::InsufficientData(_) | Error::DegenerateSequence { .. } | Error::UndefinedRate => CsStatus::InsufficientData,
        Error::Alignment { .. } => CsStatus::Alignment,
        Error::Contract(_) | Error::Config(_) | Error::OracleScope { .. } => CsStatus::InvalidArgument,
    }
}

struct Failure(CsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: CsStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal error: panic in contraspeech");
            CsStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return fail(CsStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(CsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(CsStatus::NullPointer, "output pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(CsStatus::NullPointer, "output pointer is null");
    }
    Ok(())
}

unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, capacity: usize) -> Result<(), Failure> {
    if capacity < src.len() {
        return fail(CsStatus::BufferTooSmall, format!("buffer holds {capacity} values, {} needed", src.len()));
    }
    if !src.is_empty() {
        check_out(out)?;
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

fn log_prob_matrix(log_probs: &[f32], frames: usize, vocab: usize) -> Result<FeatureMatrix, Failure> {
    let n = frames.checked_mul(vocab).ok_or_else(|| Failure(CsStatus::InvalidArgument, "size overflow".into()))?;
    if log_probs.len() != n {
        return fail(CsStatus::Dimension, "log-probability buffer does not match frames x vocab");
    }
    Ok(FeatureMatrix::new(frames, vocab, log_probs.to_vec())?)
}

/// Message describing the most recent failure on this thread (empty after a
/// success). Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows * cols` row-major floats into a new feature matrix.
///
/// # Safety
/// `data` must point to `rows * cols` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_features_new(data: *const f32, rows: usize, cols: usize, out: *mut *mut CsFeatures) -> CsStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| Failure(CsStatus::InvalidArgument, "size overflow".into()))?;
        let values = slice(data, n, "data")?;
        store(out, CsFeatures(FeatureMatrix::new(rows, cols, values.to_vec())?))
    })
}

/// # Safety
/// `features` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_features_free(features: *mut CsFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// # Safety
/// `features` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_features_shape(features: *const CsFeatures, rows: *mut usize, cols: *mut usize) -> CsStatus {
    guard(|| {
        let f = &handle(features, "features")?.0;
        check_out(rows)?;
        check_out(cols)?;
        *rows = f.rows();
        *cols = f.cols();
        Ok(())
    })
}

/// Copies the row-major values into `out`, which holds `capacity` floats.
///
/// # Safety
/// `features` must be a live handle; `out` must hold `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn cs_features_copy(features: *const CsFeatures, out: *mut f32, capacity: usize) -> CsStatus {
    guard(|| copy_out(handle(features, "features")?.0.data(), out, capacity))
}

/// # Safety
/// `features` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_pca_fit(features: *const CsFeatures, out: *mut *mut CsPcaModel) -> CsStatus {
    guard(|| store(out, CsPcaModel(pca_fit(&handle(features, "features")?.0)?)))
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_pca_free(model: *mut CsPcaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_pca_dim(model: *const CsPcaModel, dim: *mut usize) -> CsStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        check_out(dim)?;
        *dim = m.dim();
        Ok(())
    })
}

/// Writes the explained-variance ratios (descending) into `out`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn cs_pca_explained_variance_ratio(model: *const CsPcaModel, out: *mut f64, capacity: usize) -> CsStatus {
    guard(|| copy_out(&handle(model, "model")?.0.explained_variance_ratio, out, capacity))
}

/// Smallest number of components whose cumulative ratio reaches `threshold`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_pca_linear_dimensionality(model: *const CsPcaModel, threshold: f64, out: *mut usize) -> CsStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        check_out(out)?;
        *out = linear_dimensionality(m, threshold)?;
        Ok(())
    })
}

/// Projects onto all components; `whiten` non-zero divides by the standard
/// deviations.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_pca_transform(
    model: *const CsPcaModel,
    features: *const CsFeatures,
    whiten: c_int,
    out: *mut *mut CsFeatures,
) -> CsStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let f = &handle(features, "features")?.0;
        store(out, CsFeatures(pca_transform(f, m, whiten != 0)?))
    })
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// (`frames * vocab`, row-major, blank at index 0).
///
/// # Safety
/// `log_probs` must hold `frames * vocab` floats, `target` `target_len`
/// indices; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_ctc_loss(
    log_probs: *const f32,
    frames: usize,
    vocab: usize,
    target: *const usize,
    target_len: usize,
    loss: *mut f64,
) -> CsStatus {
    guard(|| {
        let n = frames.checked_mul(vocab).ok_or_else(|| Failure(CsStatus::InvalidArgument, "size overflow".into()))?;
        let lp = slice(log_probs, n, "log_probs")?;
        let target = slice(target, target_len, "target")?;
        check_out(loss)?;
        *loss = -CtcLattice::new(lp, vocab, target)?.forward_log_likelihood();
        Ok(())
    })
}

/// Greedy CTC decoding. Writes at most `capacity` labels to `out` and the
/// decoded length to `out_len`; fails with `CsStatus::BufferTooSmall` (with
/// `out_len` set) when the buffer is short.
///
/// # Safety
/// `log_probs` must hold `frames * vocab` floats; `out` must hold `capacity`
/// values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_greedy_decode(
    log_probs: *const f32,
    frames: usize,
    vocab: usize,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CsStatus {
    guard(|| {
        let n = frames.checked_mul(vocab).ok_or_else(|| Failure(CsStatus::InvalidArgument, "size overflow".into()))?;
        let lp = log_prob_matrix(slice(log_probs, n, "log_probs")?, frames, vocab)?;
        check_out(out_len)?;
        let labels = greedy_decode(&lp);
        *out_len = labels.len();
        copy_out(&labels, out, capacity)
    })
}

/// Loads a representation checkpoint written by `contraspeech pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_representation_load(path: *const c_char, out: *mut *mut CsRepresentation) -> CsStatus {
    guard(|| {
        if path.is_null() {
            return fail(CsStatus::NullPointer, "path is null");
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CsStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (model, rate, width) = Representation::load(Path::new(path))?;
        store(out, CsRepresentation { model, rate, width })
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_representation_free(model: *mut CsRepresentation) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width and frame rate (Hz) of the model's output.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_representation_info(model: *const CsRepresentation, width: *mut usize, rate: *mut f64) -> CsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        check_out(width)?;
        check_out(rate)?;
        *width = m.width;
        *rate = m.rate;
        Ok(())
    })
}

/// Extracts representations from 16 kHz mono samples.
///
/// # Safety
/// `model` must be a live handle; `samples` must hold `len` floats; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_representation_extract(
    model: *const CsRepresentation,
    samples: *const f32,
    len: usize,
    out: *mut *mut CsFeatures,
) -> CsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let samples = slice(samples, len, "samples")?;
        store(out, CsFeatures(m.model.extract(samples)?))
    })
}
