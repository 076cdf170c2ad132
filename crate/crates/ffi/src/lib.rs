//! C ABI over the motionmag pipeline.
//!
//! Frames cross the boundary as packed row-major `height * width * 3`
//! `float` buffers with values in `[0, 1]`. Every entry point returns an
//! [`MmStatus`]; on failure a description is kept per thread and can be read
//! with [`mm_last_error`]. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use motionmag::filter::MaskFill;
use motionmag::io::{from_model_range, to_model_range};
use motionmag::metrics::{psnr_from_rmse, rmse, ssim};
use motionmag::model::{load_checkpoint, magnify_frames, ForwardOptions, Model};
use motionmag::{Error, Tensor};

/// Result of every call. `MM_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    Numerical = 7,
    Panic = 8,
}

impl From<&Error> for MmStatus {
    fn from(e: &Error) -> Self {
        match e {
            e if e.is_numerical() => MmStatus::Numerical,
            Error::Shape { .. } => MmStatus::Shape,
            Error::InvalidArgument { .. } | Error::Config(_) => MmStatus::InvalidArgument,
            Error::Io { .. } => MmStatus::Io,
            Error::CheckpointMagic
            | Error::CheckpointVersion(_)
            | Error::TruncatedCheckpoint
            | Error::UnknownParameter(_)
            | Error::MissingParameter(_) => MmStatus::Checkpoint,
            _ => MmStatus::Format,
        }
    }
}

/// Architecture of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MmModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub topk: usize,
    pub eta: usize,
    pub enc_blocks: usize,
    pub n1: usize,
    pub n2: usize,
    pub upscale: usize,
}

/// Scores of one predicted frame against its ground truth.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MmMetrics {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Opaque handle to a trained model.
pub struct MmModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MmStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MmStatus::NullPointer, format!("`{what}` is null"))
}

/// Copy of a caller frame; the buffer must hold `height * width * 3` floats.
unsafe fn frame(ptr: *const f32, height: usize, width: usize, what: &str) -> Result<Tensor<f32>, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let n = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure(MmStatus::InvalidArgument, format!("bad extent {width}x{height}")))?;
    let data = std::slice::from_raw_parts(ptr, n).to_vec();
    Ok(Tensor::from_vec(&[height, width, 3], data)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint. On success `*out` owns a model to release with
/// [`mm_model_free`]; on failure it is set to NULL.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mm_model_load(path: *const c_char, out: *mut *mut MmModel) -> MmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(MmStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let inner = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(MmModel { inner }));
        Ok(())
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`mm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mm_model_free(model: *mut MmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Architecture of `model`.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mm_model_config(model: *const MmModel, out: *mut MmModelConfig) -> MmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = model.inner.config;
        *out = MmModelConfig {
            channels: c.channels,
            heads: c.heads,
            topk: c.topk,
            eta: c.eta,
            enc_blocks: c.enc_blocks,
            n1: c.n1,
            n2: c.n2,
            upscale: c.upscale,
        };
        Ok(())
    })
}

/// Magnify the motion from `reference` to `query` by `alpha`, writing the
/// frame to `out`. Extents must be even; `mask_zero` selects zero rather than
/// negative-infinity fill for masked attention logits.
///
/// # Safety
/// `reference`, `query` and `out` must each hold `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn mm_model_magnify(
    model: *const MmModel,
    reference: *const f32,
    query: *const f32,
    height: usize,
    width: usize,
    alpha: f64,
    mask_zero: bool,
    out: *mut f32,
) -> MmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Failure(MmStatus::InvalidArgument, format!("alpha must be finite and non-negative, got {alpha}")));
        }
        let r = to_model_range(&frame(reference, height, width, "reference")?);
        let q = to_model_range(&frame(query, height, width, "query")?);
        let fill = if mask_zero { MaskFill::Zero } else { MaskFill::NegInf };
        let result = from_model_range(&magnify_frames(&model.inner, &r, &q, alpha, ForwardOptions { mask_fill: fill })?);
        let data = result.data();
        std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// RMSE, PSNR and SSIM of `pred` against `gt`.
///
/// # Safety
/// `pred` and `gt` must each hold `height * width * 3` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mm_metrics(
    pred: *const f32,
    gt: *const f32,
    height: usize,
    width: usize,
    out: *mut MmMetrics,
) -> MmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = frame(pred, height, width, "pred")?;
        let g = frame(gt, height, width, "gt")?;
        let e = rmse(&p, &g)?;
        *out = MmMetrics { rmse: e, psnr: psnr_from_rmse(e), ssim: ssim(&p, &g)? };
        Ok(())
    })
}
