//! C ABI for the qarv codec.
//!
//! Every function returns a [`QarvStatus`]. On failure a description is
//! available from [`qarv_last_error`] on the same thread. Models are opaque
//! handles released with [`qarv_model_free`]; byte buffers handed out by
//! the library are released with [`qarv_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qarv::codec::{compress, decompress, CompressedImage, DecodeMode};
use qarv::image::RgbImage;
use qarv::model::{Qarv, Weights};
use qarv::QarvError;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QarvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Container = 5,
    UnsupportedVersion = 6,
    ModelMismatch = 7,
    LambdaOutOfRange = 8,
    CorruptStream = 9,
    Image = 10,
    /// A numeric failure or an internal panic.
    Internal = 11,
}

/// Which latents the decoder reads; `index` in [`qarv_decompress`] is
/// 1-based and ignored for `Full`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QarvDecodeMode {
    Full = 0,
    Progressive = 1,
    LeaveOneOut = 2,
    Disjoint = 3,
}

/// Loaded model weights.
pub struct QarvModel {
    inner: Qarv<f32>,
}

/// Library-owned bytes.
#[repr(C)]
pub struct QarvBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &QarvError) -> QarvStatus {
    match e {
        QarvError::InvalidArgument(_)
        | QarvError::Shape { .. }
        | QarvError::SymbolOutOfRange { .. } => QarvStatus::InvalidArgument,
        QarvError::Io { .. } => QarvStatus::Io,
        QarvError::Checkpoint(_) | QarvError::Json(_) => QarvStatus::Checkpoint,
        QarvError::Container(_) => QarvStatus::Container,
        QarvError::Version { .. } => QarvStatus::UnsupportedVersion,
        QarvError::ModelMismatch => QarvStatus::ModelMismatch,
        QarvError::LambdaOutOfRange { .. } => QarvStatus::LambdaOutOfRange,
        QarvError::CorruptStream => QarvStatus::CorruptStream,
        QarvError::Image(_) => QarvStatus::Image,
        QarvError::NonFinite(_) | QarvError::NonScalarLoss(_) => QarvStatus::Internal,
    }
}

struct Failure(QarvStatus, String);

impl From<QarvError> for Failure {
    fn from(e: QarvError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(QarvStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QarvStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(
            QarvStatus::Internal,
            format!("internal error: {msg}"),
        ))
    });
    match outcome {
        Ok(()) => {
            set_error("");
            QarvStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_error(&msg);
            status
        }
    }
}

fn into_buffer(bytes: Vec<u8>) -> QarvBuffer {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    QarvBuffer {
        data: Box::into_raw(boxed) as *mut u8,
        len,
    }
}

/// # Safety
/// `ptr` must be null or valid for reads of `len` bytes.
unsafe fn slice<'a>(ptr: *const u8, len: usize, what: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Description of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn qarv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a NUL-terminated string with static lifetime.
#[no_mangle]
pub extern "C" fn qarv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint. With `use_ema` set, the EMA weights are used
/// when present.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn qarv_model_load(
    path: *const c_char,
    use_ema: bool,
    out: *mut *mut QarvModel,
) -> QarvStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(QarvStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let weights = if use_ema { Weights::Ema } else { Weights::Raw };
        let inner = Qarv::load(Path::new(path), weights)?;
        *out = Box::into_raw(Box::new(QarvModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`qarv_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qarv_model_free(model: *mut QarvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of latent streams and the supported λ range.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn qarv_model_info(
    model: *const QarvModel,
    num_latents: *mut u32,
    lambda_low: *mut f64,
    lambda_high: *mut f64,
) -> QarvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = m.inner.config();
        if let Some(n) = num_latents.as_mut() {
            *n = cfg.num_latents() as u32;
        }
        if let Some(lo) = lambda_low.as_mut() {
            *lo = cfg.lambda_low;
        }
        if let Some(hi) = lambda_high.as_mut() {
            *hi = cfg.lambda_high;
        }
        Ok(())
    })
}

/// Compresses interleaved 8-bit RGB (`width * height * 3` bytes) at rate
/// parameter `lambda`. The container is written to `out`.
///
/// # Safety
/// `model` must be a live handle, `rgb` valid for the stated size, and
/// `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn qarv_compress(
    model: *const QarvModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    lambda: f64,
    out: *mut QarvBuffer,
) -> QarvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = QarvBuffer {
            data: ptr::null_mut(),
            len: 0,
        };
        let (w, h) = (width as usize, height as usize);
        if w == 0 || h == 0 {
            return Err(Failure(QarvStatus::InvalidArgument, "empty image".into()));
        }
        let pixels = slice(rgb, w * h * 3, "rgb")?.to_vec();
        let img = RgbImage::new(w, h, pixels)?;
        let enc = compress(&m.inner, &img.to_tensor(), lambda)?;
        *out = into_buffer(enc.container.to_bytes()?);
        Ok(())
    })
}

/// Decodes a container into interleaved 8-bit RGB.
///
/// # Safety
/// `model` must be a live handle, `data` valid for `len` bytes, and the
/// out pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qarv_decompress(
    model: *const QarvModel,
    data: *const u8,
    len: usize,
    mode: QarvDecodeMode,
    index: u32,
    out_rgb: *mut QarvBuffer,
    out_width: *mut u32,
    out_height: *mut u32,
) -> QarvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_rgb.as_mut().ok_or_else(|| null("out_rgb"))?;
        let ow = out_width.as_mut().ok_or_else(|| null("out_width"))?;
        let oh = out_height.as_mut().ok_or_else(|| null("out_height"))?;
        *out = QarvBuffer {
            data: ptr::null_mut(),
            len: 0,
        };
        let container = CompressedImage::from_bytes(slice(data, len, "data")?)?;
        let i = index as usize;
        let mode = match mode {
            QarvDecodeMode::Full => DecodeMode::Full,
            QarvDecodeMode::Progressive => DecodeMode::Progressive(i),
            QarvDecodeMode::LeaveOneOut => DecodeMode::LeaveOneOut(i),
            QarvDecodeMode::Disjoint => DecodeMode::Disjoint(i),
        };
        let dec = decompress(&m.inner, &container, mode)?;
        let img = RgbImage::from_tensor(&dec.image)?;
        *ow = img.width as u32;
        *oh = img.height as u32;
        *out = into_buffer(img.pixels);
        Ok(())
    })
}

/// Releases bytes returned by the library and resets the buffer; a null
/// or empty buffer is ignored.
///
/// # Safety
/// `buf` must be null or hold a buffer filled by this library.
#[no_mangle]
pub unsafe extern "C" fn qarv_buffer_free(buf: *mut QarvBuffer) {
    let Some(b) = buf.as_mut() else { return };
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
    b.data = ptr::null_mut();
    b.len = 0;
}
