//! C ABI over the `oscxr` core: checkpoint inference, Grad-CAM, the OS
//! penalty and calibration scores.
//!
//! Every fallible call returns an [`OscxrStatus`]; on failure the message is
//! available from [`oscxr_last_error_message`] on the same thread. Models are
//! opaque [`OscxrModel`] handles released with [`oscxr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use oscxr::autodiff::{Tape, Tensor};
use oscxr::gradcam::{gradcam, CamConfig};
use oscxr::metrics;
use oscxr::nn::{predict_proba, Checkpoint, ModelSpec};
use oscxr::os_loss::{os_penalty, partition};
use oscxr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OscxrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Ingestion = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Diverged = 8,
    Io = 9,
    Panic = 10,
}

/// Loaded checkpoint and the model it describes.
pub struct OscxrModel {
    spec: ModelSpec,
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OscxrStatus {
    match e {
        Error::Dimension { .. } => OscxrStatus::Dimension,
        Error::Contract { .. } => OscxrStatus::InvalidArgument,
        Error::Config(_) => OscxrStatus::Config,
        Error::NonFinite { .. } => OscxrStatus::NonFinite,
        Error::Ingestion { .. } => OscxrStatus::Ingestion,
        Error::Checkpoint(_) => OscxrStatus::Checkpoint,
        Error::Diverged { .. } => OscxrStatus::Diverged,
        Error::Io { .. } => OscxrStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OscxrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OscxrStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OscxrStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            OscxrStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OscxrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn oscxr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn oscxr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint file and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn oscxr_model_load(path: *const c_char, out: *mut *mut OscxrModel) -> OscxrStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out as *const *mut OscxrModel, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
        let checkpoint = Checkpoint::load(Path::new(p))?;
        let spec = checkpoint.meta.model_spec()?;
        *out = Box::into_raw(Box::new(OscxrModel { spec, checkpoint }));
        Ok(())
    })
}

/// Releases a handle from [`oscxr_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oscxr_model_free(model: *mut OscxrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn oscxr_model_num_classes(model: *const OscxrModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.num_classes)
}

/// Expected input side length in pixels, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn oscxr_model_image_side(model: *const OscxrModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.image_side)
}

/// Class probabilities for `n` images laid out as `[n, 3, side, side]`
/// floats in `[0, 1]`. Writes `n × num_classes` values to `out_probs`.
///
/// # Safety
/// `pixels` must hold `n·3·side²` floats and `out_probs` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn oscxr_model_predict(
    model: *const OscxrModel,
    pixels: *const f32,
    n: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> OscxrStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        non_null(pixels, "pixels")?;
        non_null(out_probs as *const f64, "out_probs")?;
        let side = m.spec.image_side;
        let k = m.spec.num_classes;
        if n == 0 {
            return Err(Fail::Arg("n must be positive".into()));
        }
        if out_len < n * k {
            return Err(Fail::Arg(format!("out_len {out_len} < {}", n * k)));
        }
        let data = std::slice::from_raw_parts(pixels, n * 3 * side * side).to_vec();
        let batch = Tensor::new(vec![n, 3, side, side], data)?;
        let probs = predict_proba(&m.spec, &m.checkpoint.params, batch)?;
        let out = std::slice::from_raw_parts_mut(out_probs, n * k);
        for (o, v) in out.iter_mut().zip(probs.iter().flatten()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Grad-CAM heatmap of `class_id` for one `[3, side, side]` image, written
/// as `side × side` row-major values in `[0, 1]`.
///
/// # Safety
/// `pixels` must hold `3·side²` floats and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn oscxr_model_gradcam(
    model: *const OscxrModel,
    pixels: *const f32,
    class_id: usize,
    out: *mut f64,
    out_len: usize,
) -> OscxrStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        non_null(pixels, "pixels")?;
        non_null(out as *const f64, "out")?;
        let side = m.spec.image_side;
        if out_len < side * side {
            return Err(Fail::Arg(format!("out_len {out_len} < {}", side * side)));
        }
        let data = std::slice::from_raw_parts(pixels, 3 * side * side).to_vec();
        let img = Tensor::new(vec![3, side, side], data)?;
        let h = gradcam(&m.spec, &m.checkpoint.params, &img, class_id, &CamConfig::default())?;
        std::slice::from_raw_parts_mut(out, side * side).copy_from_slice(&h.values);
        Ok(())
    })
}

/// `‖ZᵀZ − I‖²_F` of one length-`m` feature vector cut into `k` blocks.
///
/// # Safety
/// `features` must hold `m` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oscxr_os_penalty(features: *const f64, m: usize, k: usize, out: *mut f64) -> OscxrStatus {
    guard(|| {
        non_null(features, "features")?;
        non_null(out as *const f64, "out")?;
        let data = std::slice::from_raw_parts(features, m).to_vec();
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::new(vec![m], data)?);
        let fm = partition(&mut tape, f, k)?;
        let p = os_penalty(&mut tape, &fm)?;
        *out = tape.value(p).item();
        Ok(())
    })
}

/// ECE and OE over `bins` equal-width bins. `correct[i]` is nonzero when
/// prediction `i` was right.
///
/// # Safety
/// `confidences` and `correct` must hold `n` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn oscxr_calibration(
    confidences: *const f64,
    correct: *const u8,
    n: usize,
    bins: usize,
    out_ece: *mut f64,
    out_oe: *mut f64,
) -> OscxrStatus {
    guard(|| {
        non_null(confidences, "confidences")?;
        non_null(correct, "correct")?;
        non_null(out_ece as *const f64, "out_ece")?;
        non_null(out_oe as *const f64, "out_oe")?;
        let conf = std::slice::from_raw_parts(confidences, n);
        let ok: Vec<bool> = std::slice::from_raw_parts(correct, n).iter().map(|&c| c != 0).collect();
        *out_ece = metrics::ece(conf, &ok, bins)?;
        *out_oe = metrics::oe(conf, &ok, bins)?;
        Ok(())
    })
}

/// Brier score of `n × k` row-major probabilities against `labels`.
///
/// # Safety
/// `probs` must hold `n·k` doubles, `labels` `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oscxr_brier(
    probs: *const f64,
    n: usize,
    k: usize,
    labels: *const usize,
    out: *mut f64,
) -> OscxrStatus {
    guard(|| {
        non_null(probs, "probs")?;
        non_null(labels, "labels")?;
        non_null(out as *const f64, "out")?;
        if k == 0 {
            return Err(Fail::Arg("k must be positive".into()));
        }
        let rows: Vec<Vec<f64>> = std::slice::from_raw_parts(probs, n * k)
            .chunks(k)
            .map(|r| r.to_vec())
            .collect();
        *out = metrics::brier(&rows, std::slice::from_raw_parts(labels, n))?;
        Ok(())
    })
}
