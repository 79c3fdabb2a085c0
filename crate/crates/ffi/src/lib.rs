//! C ABI over `mbmd-core`: checkpoint loading, raw-signal inference and the
//! wavelet band split. Every entry point returns an `MbmdStatus`; on failure
//! a message is kept per thread and can be copied out with `mbmd_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mbmd::diffcore::Tensor;
use mbmd::model::{load_checkpoint, MbmdModel as CoreModel, ModelError};
use mbmd::wpd::{band_grouping_preset, decompose_matrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbmdStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Shape = 4,
    Numeric = 5,
    Panic = 6,
}

/// Opaque handle to a loaded model.
pub struct MbmdModel {
    inner: CoreModel<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MbmdModelInfo {
    pub channels: usize,
    pub window_len: usize,
    pub num_classes: usize,
    pub num_branches: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: MbmdStatus, msg: impl Into<String>) -> MbmdStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> MbmdStatus) -> MbmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == MbmdStatus::Ok {
                set_error("");
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(MbmdStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn model_status(e: &ModelError) -> MbmdStatus {
    match e {
        ModelError::Io(_) => MbmdStatus::Io,
        ModelError::Checkpoint(_) | ModelError::Config(_) => MbmdStatus::Format,
        ModelError::Shape(_) | ModelError::BandCount { .. } => MbmdStatus::Shape,
        _ => MbmdStatus::Numeric,
    }
}

/// Loads a checkpoint from a NUL-terminated UTF-8 path into `*out`.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer. The handle
/// written to `*out` must be released with `mbmd_model_free`.
#[no_mangle]
pub unsafe extern "C" fn mbmd_model_load(path: *const c_char, out: *mut *mut MbmdModel) -> MbmdStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(MbmdStatus::NullPointer, "null argument");
        }
        *out = std::ptr::null_mut();
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(MbmdStatus::Format, "path is not UTF-8");
        };
        match load_checkpoint::<f32>(Path::new(p)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MbmdModel { inner }));
                MbmdStatus::Ok
            }
            Err(e) => fail(model_status(&e), format!("{p}: {e}")),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `mbmd_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mbmd_model_free(model: *mut MbmdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `info` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mbmd_model_info(model: *const MbmdModel, info: *mut MbmdModelInfo) -> MbmdStatus {
    guard(|| {
        if model.is_null() || info.is_null() {
            return fail(MbmdStatus::NullPointer, "null argument");
        }
        let c = (*model).inner.config();
        *info = MbmdModelInfo { channels: c.channels, window_len: c.window_len, num_classes: c.num_classes, num_branches: c.num_branches };
        MbmdStatus::Ok
    })
}

/// Runs raw-signal inference on `batch` windows laid out as
/// `batch x channels x len` row-major floats, writing `batch x num_classes`
/// logits.
///
/// # Safety
/// `windows` must point to `batch * channels * len` floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mbmd_model_infer(
    model: *const MbmdModel,
    windows: *const f32,
    batch: usize,
    channels: usize,
    len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MbmdStatus {
    guard(|| {
        if model.is_null() || windows.is_null() || logits.is_null() {
            return fail(MbmdStatus::NullPointer, "null argument");
        }
        let m = &(*model).inner;
        let c = m.config();
        if channels != c.channels || len != c.window_len {
            return fail(MbmdStatus::Shape, format!("window {channels}x{len}, model expects {}x{}", c.channels, c.window_len));
        }
        if batch == 0 {
            return fail(MbmdStatus::Shape, "empty batch");
        }
        let Some(need) = batch.checked_mul(c.num_classes) else {
            return fail(MbmdStatus::Shape, "batch too large");
        };
        if logits_len < need {
            return fail(MbmdStatus::Shape, format!("logits buffer holds {logits_len}, need {need}"));
        }
        let per = channels * len;
        let Some(total) = batch.checked_mul(per) else {
            return fail(MbmdStatus::Shape, "batch too large");
        };
        let input = std::slice::from_raw_parts(windows, total);
        if input.iter().any(|v| !v.is_finite()) {
            return fail(MbmdStatus::Numeric, "non-finite input");
        }
        let tensors: Vec<Tensor<f32>> =
            input.chunks_exact(per).map(|w| Tensor::new(vec![channels, len], w.to_vec()).expect("shape checked")).collect();
        let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
        match m.forward_infer(&refs) {
            Ok(z) => {
                if !z.is_finite() {
                    return fail(MbmdStatus::Numeric, "non-finite logits");
                }
                std::slice::from_raw_parts_mut(logits, need).copy_from_slice(z.data());
                MbmdStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Splits a single-channel 128 Hz signal into the bands of the preset with
/// `branches` branches (2, 3 or 6). Band `b` is written to
/// `out[b * len .. (b + 1) * len]`.
///
/// # Safety
/// `signal` must point to `len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mbmd_wpd_decompose(signal: *const f64, len: usize, branches: usize, out: *mut f64, out_len: usize) -> MbmdStatus {
    guard(|| {
        if signal.is_null() || out.is_null() {
            return fail(MbmdStatus::NullPointer, "null argument");
        }
        let grouping = match band_grouping_preset(branches) {
            Ok(g) => g,
            Err(e) => return fail(MbmdStatus::Shape, e.to_string()),
        };
        let Some(need) = len.checked_mul(branches) else {
            return fail(MbmdStatus::Shape, "signal too long");
        };
        if out_len < need {
            return fail(MbmdStatus::Shape, format!("output buffer holds {out_len}, need {need}"));
        }
        let x = std::slice::from_raw_parts(signal, len);
        if x.iter().any(|v| !v.is_finite()) {
            return fail(MbmdStatus::Numeric, "non-finite input");
        }
        let t = match Tensor::new(vec![1, len], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(MbmdStatus::Shape, e.to_string()),
        };
        match decompose_matrix(&t, &grouping) {
            Ok(bands) => {
                let dst = std::slice::from_raw_parts_mut(out, need);
                for (b, band) in bands.iter().enumerate() {
                    dst[b * len..(b + 1) * len].copy_from_slice(band.data());
                }
                MbmdStatus::Ok
            }
            Err(e) => fail(MbmdStatus::Shape, e.to_string()),
        }
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn mbmd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn mbmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
