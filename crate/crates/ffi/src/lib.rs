//! C ABI over the segmentation network.
//!
//! Models are opaque handles created by `sconv_model_new_toy` or `sconv_model_load` and
//! released with `sconv_model_free`. Every fallible call returns an [`SconvStatus`]; the message
//! of the most recent failure on the calling thread is available from `sconv_last_error`.
//! Tensors cross the boundary as contiguous row-major `f32` buffers with explicit lengths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sconv_core::net::{load_checkpoint, save_checkpoint, Mode, NetworkConfig, SegModel};
use sconv_core::train::predict;
use sconv_core::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SconvStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Io = 3,
    Data = 4,
    Dimension = 5,
    Numeric = 6,
    State = 7,
    Metric = 8,
    Generation = 9,
    Image = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

impl From<&Error> for SconvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => SconvStatus::Config,
            Error::Io { .. } => SconvStatus::Io,
            Error::Data(_) => SconvStatus::Data,
            Error::Dimension(_) => SconvStatus::Dimension,
            Error::Numeric(_) => SconvStatus::Numeric,
            Error::State(_) => SconvStatus::State,
            Error::Metric(_) => SconvStatus::Metric,
            Error::Generation(_) => SconvStatus::Generation,
            Error::Image { .. } => SconvStatus::Image,
        }
    }
}

/// Parameter counts by role.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SconvParamCounts {
    pub backbone: u64,
    pub sconv_extra: u64,
    pub decoder: u64,
    pub aux: u64,
    pub total: u64,
}

/// Opaque network handle.
pub struct SconvModel {
    inner: SegModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Utf8,
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SconvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SconvStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer passed as `{what}`"));
            SconvStatus::NullPointer
        }
        Ok(Err(Failure::Utf8)) => {
            set_last_error("path is not valid UTF-8".into());
            SconvStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            SconvStatus::from(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SconvStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const SconvModel) -> Result<&'a SconvModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn model_mut<'a>(m: *mut SconvModel) -> Result<&'a mut SconvModel, Failure> {
    m.as_mut().ok_or(Failure::Null("model"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8)?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Error::Dimension(format!("`{what}` holds {got} values, expected {want}")).into());
    }
    Ok(())
}

/// Builds `[n,3,h,w]` and `[n,c',h,w]` inputs after checking the buffer lengths.
unsafe fn inputs(
    m: &SconvModel,
    image: *const f32,
    image_len: usize,
    spatial: *const f32,
    spatial_len: usize,
    dims: [usize; 3],
) -> Result<(Tensor<f32>, Tensor<f32>), Failure> {
    let [n, h, w] = dims;
    let c = m.inner.config().source.channels();
    let img = slice_arg(image, image_len, "image")?;
    let sp = slice_arg(spatial, spatial_len, "spatial")?;
    expect_len(image_len, n * 3 * h * w, "image")?;
    expect_len(spatial_len, n * c * h * w, "spatial")?;
    Ok((
        Tensor::from_vec(&[n, 3, h, w], img.to_vec())?,
        Tensor::from_vec(&[n, c, h, w], sp.to_vec())?,
    ))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sconv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
/// `len`) and returns the buffer size needed for the whole message including the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sconv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let k = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, k);
            *buf.add(k - 1) = 0;
        }
        bytes.len()
    })
}

/// Creates the toy network (`guided == false` gives the plain-convolution twin).
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_new_toy(
    num_classes: u32,
    seed: u64,
    guided: bool,
    out: *mut *mut SconvModel,
) -> SconvStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let mut cfg = NetworkConfig {
            seed,
            ..NetworkConfig::toy(num_classes as usize)
        };
        if !guided {
            cfg = cfg.baseline();
        }
        let inner = SegModel::new(cfg)?;
        *out = Box::into_raw(Box::new(SconvModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_load(dir: *const c_char, out: *mut *mut SconvModel) -> SconvStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let (inner, _) = load_checkpoint::<f32>(path_arg(dir)?)?;
        *out = Box::into_raw(Box::new(SconvModel { inner }));
        Ok(())
    })
}

/// Writes the model as a checkpoint directory.
///
/// # Safety
/// `m` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_save(m: *const SconvModel, dir: *const c_char) -> SconvStatus {
    guard(|| {
        let m = model_ref(m)?;
        save_checkpoint(&m.inner, path_arg(dir)?, Default::default())?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_free(m: *mut SconvModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Class count, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_num_classes(m: *const SconvModel) -> u32 {
    m.as_ref().map_or(0, |m| m.inner.config().num_classes as u32)
}

/// Channels expected in the spatial input, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_spatial_channels(m: *const SconvModel) -> u32 {
    m.as_ref().map_or(0, |m| m.inner.config().source.channels() as u32)
}

/// Number of guided convolutions, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_guided_convs(m: *const SconvModel) -> u32 {
    m.as_ref().map_or(0, |m| m.inner.guided_convs().len() as u32)
}

/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_param_counts(m: *const SconvModel, out: *mut SconvParamCounts) -> SconvStatus {
    guard(|| {
        let m = model_ref(m)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let b = m.inner.param_breakdown();
        *out = SconvParamCounts {
            backbone: b.backbone as u64,
            sconv_extra: b.sconv_extra as u64,
            decoder: b.decoder as u64,
            aux: b.aux as u64,
            total: b.total as u64,
        };
        Ok(())
    })
}

/// Evaluation-mode forward pass writing `[n, classes, h, w]` logits.
///
/// # Safety
/// Every pointer must be valid for the paired length; `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_forward(
    m: *mut SconvModel,
    image: *const f32,
    image_len: usize,
    spatial: *const f32,
    spatial_len: usize,
    n: usize,
    height: usize,
    width: usize,
    logits: *mut f32,
    logits_len: usize,
) -> SconvStatus {
    guard(|| {
        let m = model_mut(m)?;
        let (x, s) = inputs(m, image, image_len, spatial, spatial_len, [n, height, width])?;
        let dst = slice_mut_arg(logits, logits_len, "logits")?;
        let classes = m.inner.config().num_classes;
        expect_len(logits_len, n * classes * height * width, "logits")?;
        let out = m.inner.forward(&x, &s, Mode::Eval)?;
        dst.copy_from_slice(out.logits.data());
        Ok(())
    })
}

/// Per-pixel class prediction for a single image, written as `h * w` labels.
///
/// # Safety
/// Every pointer must be valid for the paired length; `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sconv_model_predict(
    m: *mut SconvModel,
    image: *const f32,
    image_len: usize,
    spatial: *const f32,
    spatial_len: usize,
    height: usize,
    width: usize,
    labels: *mut u8,
    labels_len: usize,
) -> SconvStatus {
    guard(|| {
        let m = model_mut(m)?;
        let (x, s) = inputs(m, image, image_len, spatial, spatial_len, [1, height, width])?;
        let dst = slice_mut_arg(labels, labels_len, "labels")?;
        expect_len(labels_len, height * width, "labels")?;
        let out = m.inner.forward(&x, &s, Mode::Eval)?;
        dst.copy_from_slice(&predict(&out.logits)?.data);
        Ok(())
    })
}
