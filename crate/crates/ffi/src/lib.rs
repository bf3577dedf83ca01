//! C ABI over `nodekd`: load a checkpoint, run inference, and a few pure
//! helpers. Every fallible function returns a [`NodekdStatus`]; the message
//! of the most recent failure on the calling thread is available from
//! [`nodekd_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nodekd::autodiff::Tensor;
use nodekd::models::{evaluate, load_checkpoint, Classifier, Model};
use nodekd::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodekdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
}

/// Opaque handle to a loaded teacher or student.
pub struct NodekdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(e: &Error) -> NodekdStatus {
    if e.is_numeric() {
        return NodekdStatus::Numeric;
    }
    match e {
        Error::Io(_) => NodekdStatus::Io,
        Error::CheckpointVersion { .. }
        | Error::CheckpointCorrupt(_)
        | Error::CheckpointShape { .. }
        | Error::CheckpointKind { .. } => NodekdStatus::Checkpoint,
        Error::Shape { .. } => NodekdStatus::Shape,
        _ => NodekdStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (NodekdStatus, String)>) -> NodekdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NodekdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NodekdStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (NodekdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NodekdStatus, String) {
    (NodekdStatus::NullPointer, format!("{what} is null"))
}

fn model_ref<'a>(m: *const NodekdModel) -> Result<&'a NodekdModel, (NodekdStatus, String)> {
    // SAFETY: the caller passes a handle obtained from nodekd_model_load
    // that has not been freed.
    unsafe { m.as_ref() }.ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nodekd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn nodekd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `nodekd`. On success `*out` owns a handle
/// that must be released with [`nodekd_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nodekd_model_load(path: *const c_char, out: *mut *mut NodekdModel) -> NodekdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (NodekdStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, _) = load_checkpoint(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(NodekdModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`nodekd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nodekd_model_free(model: *mut NodekdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nodekd_model_num_classes(model: *const NodekdModel, out: *mut usize) -> NodekdStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.classes();
        Ok(())
    })
}

/// Input shape `(channels, height, width)` written to `out[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `out` point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn nodekd_model_input_shape(model: *const NodekdModel, out: *mut usize) -> NodekdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = m.model.input_shape();
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&s);
        Ok(())
    })
}

unsafe fn run_logits(m: &NodekdModel, images: *const f64, n: usize) -> Result<Tensor, (NodekdStatus, String)> {
    if images.is_null() {
        return Err(null("images"));
    }
    if n == 0 {
        return Err((NodekdStatus::InvalidArgument, "batch is empty".into()));
    }
    let [c, h, w] = m.model.input_shape();
    let data = std::slice::from_raw_parts(images, n * c * h * w).to_vec();
    let x = Tensor::new(&[n, c, h, w], data).map_err(lib_err)?;
    Ok(evaluate(m.model.as_classifier(), &x).map_err(lib_err)?.logits)
}

/// Logits of `n` images laid out as `(n, c, h, w)` in row-major order,
/// pixel values in `[0, 1]`. Writes `n * classes` values to `out`;
/// `out_len` must be at least that.
///
/// # Safety
/// `images` must hold `n * c * h * w` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn nodekd_model_logits(
    model: *const NodekdModel,
    images: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> NodekdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = n * m.model.classes();
        if out_len < need {
            return Err((NodekdStatus::InvalidArgument, format!("out has {out_len} slots, need {need}")));
        }
        let logits = run_logits(m, images, n)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Predicted class of each of `n` images; `out` receives `n` values.
///
/// # Safety
/// As [`nodekd_model_logits`], with `out` holding `n` values.
#[no_mangle]
pub unsafe extern "C" fn nodekd_model_predict(
    model: *const NodekdModel,
    images: *const f64,
    n: usize,
    out: *mut usize,
) -> NodekdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let logits = run_logits(m, images, n)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&logits.argmax_rows());
        Ok(())
    })
}

/// Temperature-softened softmax of a `(rows, cols)` logit matrix into `out`.
///
/// # Safety
/// `logits` and `out` must each hold `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn nodekd_soft_targets(
    logits: *const f64,
    rows: usize,
    cols: usize,
    temperature: f64,
    out: *mut f64,
) -> NodekdStatus {
    guard(|| {
        if logits.is_null() {
            return Err(null("logits"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let data = std::slice::from_raw_parts(logits, rows * cols).to_vec();
        let t = Tensor::new(&[rows, cols], data).map_err(lib_err)?;
        let p = nodekd::distill::soft_targets(&t, temperature).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, rows * cols).copy_from_slice(p.data());
        Ok(())
    })
}

/// Attack step count for an L-infinity budget `epsilon` in `[0, 1]` pixel
/// units.
#[no_mangle]
pub extern "C" fn nodekd_num_steps(epsilon: f64) -> usize {
    nodekd::attacks::num_steps(epsilon)
}

/// Step-decay learning rate for `epoch` of `total_epochs`.
#[no_mangle]
pub extern "C" fn nodekd_lr_schedule(initial_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    nodekd::distill::lr_schedule(initial_lr, epoch, total_epochs)
}
