//! C ABI for loading checkpoints, running predictions and evaluations,
//! generating corruptions and computing calibration error.
//!
//! Every function returns a [`CorrobustStatus`]; on failure a message is
//! kept per thread and can be read with [`corrobust_last_error`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use corrobust::attacks::{apply, fgm, ModelObjective};
use corrobust::checkpoint::load_checkpoint;
use corrobust::corruptions::{corrupt, CorruptionSpec, Kind, ALL_KINDS};
use corrobust::data::{gen_synthetic, load_cifar10_binary, Dataset, SyntheticSpec};
use corrobust::metrics::{accuracy, avg_corruption_accuracy, ece, evaluate_corruptions, predictions};
use corrobust::model::ModelGraph;
use corrobust::{Error, Tensor};

/// Result of every call. Values mirror the CLI's error classes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrobustStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    CheckpointError = 4,
    NumericError = 5,
    IoError = 6,
    Panic = 7,
}

/// A trained model.
pub struct CorrobustModel {
    inner: ModelGraph,
}

/// A labelled image set.
pub struct CorrobustDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CorrobustStatus {
    match e {
        Error::Checkpoint { .. } => CorrobustStatus::CheckpointError,
        Error::Io(_) => CorrobustStatus::IoError,
        Error::Data(_) | Error::Json(_) | Error::MissingCell(_) => CorrobustStatus::DataError,
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownName(_) => CorrobustStatus::InvalidArgument,
        _ => CorrobustStatus::NumericError,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard<F>(f: F) -> CorrobustStatus
where
    F: FnOnce() -> Result<(), (CorrobustStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CorrobustStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            CorrobustStatus::Panic
        }
    }
}

fn lib<T>(r: corrobust::Result<T>) -> Result<T, (CorrobustStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CorrobustStatus, String) {
    (CorrobustStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (CorrobustStatus, String) {
    (CorrobustStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CorrobustStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CorrobustModel) -> Result<&'a ModelGraph, (CorrobustStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn dataset_ref<'a>(d: *const CorrobustDataset) -> Result<&'a Dataset, (CorrobustStatus, String)> {
    d.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset"))
}

/// Builds an `[n, C, H, W]` batch shaped for `model` from a flat buffer.
unsafe fn batch_arg(
    model: &ModelGraph,
    images: *const f32,
    n: usize,
) -> Result<Tensor<f32>, (CorrobustStatus, String)> {
    if images.is_null() {
        return Err(null("images"));
    }
    let spec = model.spec.as_ref().ok_or_else(|| invalid("model has no spec"))?;
    let [c, h, w] = spec.input_shape;
    let data = slice::from_raw_parts(images, n * c * h * w).to_vec();
    lib(Tensor::new(vec![n, c, h, w], data))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn corrobust_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn corrobust_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn corrobust_model_load(path: *const c_char, out: *mut *mut CorrobustModel) -> CorrobustStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (inner, _) = lib(load_checkpoint(Path::new(path)))?;
        *out = Box::into_raw(Box::new(CorrobustModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `corrobust_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn corrobust_model_free(model: *mut CorrobustModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[channels, height, width]` and the class count.
///
/// # Safety
/// `shape` must be valid for 3 writes and `classes` for one.
#[no_mangle]
pub unsafe extern "C" fn corrobust_model_info(
    model: *const CorrobustModel,
    shape: *mut usize,
    classes: *mut usize,
) -> CorrobustStatus {
    guard(|| {
        let m = model_ref(model)?;
        if shape.is_null() || classes.is_null() {
            return Err(null("output"));
        }
        let spec = m.spec.as_ref().ok_or_else(|| invalid("model has no spec"))?;
        slice::from_raw_parts_mut(shape, 3).copy_from_slice(&spec.input_shape);
        *classes = m.num_classes();
        Ok(())
    })
}

/// Predicted class of each of `n` images laid out as `[n, C, H, W]`.
///
/// # Safety
/// `images` must hold `n * C * H * W` floats and `labels_out` `n` slots.
#[no_mangle]
pub unsafe extern "C" fn corrobust_model_predict(
    model: *const CorrobustModel,
    images: *const f32,
    n: usize,
    labels_out: *mut u32,
) -> CorrobustStatus {
    guard(|| {
        let m = model_ref(model)?;
        if labels_out.is_null() {
            return Err(null("labels_out"));
        }
        if n == 0 {
            return Ok(());
        }
        let x = batch_arg(m, images, n)?;
        let pred = lib(predictions(m, &x))?;
        let out = slice::from_raw_parts_mut(labels_out, n);
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// ℓ2 fast gradient attack of radius `eps`, box-clipped; writes the
/// perturbed images.
///
/// # Safety
/// `images` and `images_out` must hold `n * C * H * W` floats, `labels` `n`.
#[no_mangle]
pub unsafe extern "C" fn corrobust_fgm(
    model: *const CorrobustModel,
    images: *const f32,
    labels: *const u32,
    n: usize,
    eps: f32,
    images_out: *mut f32,
) -> CorrobustStatus {
    guard(|| {
        let m = model_ref(model)?;
        if labels.is_null() || images_out.is_null() {
            return Err(null("labels or images_out"));
        }
        if n == 0 {
            return Ok(());
        }
        let x = batch_arg(m, images, n)?;
        let k = m.num_classes();
        let y: Vec<usize> = slice::from_raw_parts(labels, n).iter().map(|&v| v as usize).collect();
        if let Some(bad) = y.iter().find(|&&v| v >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let d = lib(fgm(&ModelObjective::eval(m), &x, &y, eps))?;
        let xa = lib(apply(&x, &d))?;
        slice::from_raw_parts_mut(images_out, xa.len()).copy_from_slice(xa.data());
        Ok(())
    })
}

/// Procedural dataset with `classes` shape classes of `size` x `size` pixels.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn corrobust_dataset_synthetic(
    classes: usize,
    size: usize,
    samples_per_class: usize,
    seed: u64,
    out: *mut *mut CorrobustDataset,
) -> CorrobustStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(gen_synthetic(&SyntheticSpec {
            classes,
            size,
            samples_per_class,
            seed,
        }))?;
        *out = Box::into_raw(Box::new(CorrobustDataset { inner }));
        Ok(())
    })
}

/// Reads a CIFAR-10 binary batch file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn corrobust_dataset_load_cifar10(
    path: *const c_char,
    out: *mut *mut CorrobustDataset,
) -> CorrobustStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(load_cifar10_binary(Path::new(path)))?;
        *out = Box::into_raw(Box::new(CorrobustDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn corrobust_dataset_len(dataset: *const CorrobustDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn corrobust_dataset_free(dataset: *mut CorrobustDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Clean accuracy of `model` on `dataset`.
///
/// # Safety
/// Handles must be live; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn corrobust_accuracy(
    model: *const CorrobustModel,
    dataset: *const CorrobustDataset,
    out: *mut f64,
) -> CorrobustStatus {
    guard(|| {
        let (m, d) = (model_ref(model)?, dataset_ref(dataset)?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lib(accuracy(m, d))?;
        Ok(())
    })
}

/// Mean accuracy over all corruption kinds and severities.
///
/// # Safety
/// Handles must be live; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn corrobust_corruption_accuracy(
    model: *const CorrobustModel,
    dataset: *const CorrobustDataset,
    seed: u64,
    out: *mut f64,
) -> CorrobustStatus {
    guard(|| {
        let (m, d) = (model_ref(model)?, dataset_ref(dataset)?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = avg_corruption_accuracy(&lib(evaluate_corruptions(m, d, &ALL_KINDS, seed))?);
        Ok(())
    })
}

/// Applies a named corruption (e.g. `"gaussian_noise"`) at severity 1..5 to
/// one `[C, H, W]` image.
///
/// # Safety
/// `image` and `image_out` must hold `channels * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn corrobust_corrupt_image(
    kind: *const c_char,
    severity: u8,
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    image: *const f32,
    image_out: *mut f32,
) -> CorrobustStatus {
    guard(|| {
        let kind: Kind = lib(str_arg(kind, "kind")?.parse())?;
        if image.is_null() || image_out.is_null() {
            return Err(null("image"));
        }
        let n = channels * height * width;
        let img = lib(Tensor::new(
            vec![channels, height, width],
            slice::from_raw_parts(image, n).to_vec(),
        ))?;
        let out = lib(corrupt(&img, &CorruptionSpec { kind, severity, seed }))?;
        slice::from_raw_parts_mut(image_out, n).copy_from_slice(out.data());
        Ok(())
    })
}

/// Expected calibration error over `bins` equal-width confidence bins.
/// `correct[i]` is nonzero when prediction `i` was right.
///
/// # Safety
/// `confidences` and `correct` must hold `n` values; `out` one write.
#[no_mangle]
pub unsafe extern "C" fn corrobust_ece(
    confidences: *const f64,
    correct: *const u8,
    n: usize,
    bins: usize,
    out: *mut f64,
) -> CorrobustStatus {
    guard(|| {
        if confidences.is_null() || correct.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let c = slice::from_raw_parts(confidences, n);
        let ok: Vec<bool> = slice::from_raw_parts(correct, n).iter().map(|&v| v != 0).collect();
        *out = lib(ece(c, &ok, bins))?.ece;
        Ok(())
    })
}
