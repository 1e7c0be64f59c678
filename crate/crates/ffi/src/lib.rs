//! C ABI over the vcorr engine.
//!
//! Every fallible call returns a [`VcorrStatus`]; on failure the message is
//! available from [`vcorr_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load` calls and released by the
//! matching `*_free`. Images are planar RGB `float` in `[0, 1]`, laid out
//! channel, row, column.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array2, Array3};
use vcorr::affinity::{compute_affinity, compute_mutual_affinity, FeatureMap};
use vcorr::backbone::{Backbone, BackboneConfig};
use vcorr::image::Image;
use vcorr::metrics::jaccard;
use vcorr::pipeline::pad_to_stride;
use vcorr::propagation::{frame_features, knn_filter, propagate_masks, LabelKind, PropagationConfig};
use vcorr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcorrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Runtime = 7,
    Panic = 8,
}

pub struct VcorrBackbone {
    inner: Backbone,
}

pub struct VcorrFeatures {
    inner: FeatureMap,
}

pub struct VcorrPropagator {
    config: PropagationConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VcorrStatus {
    match e {
        Error::Dimension(_) => VcorrStatus::Dimension,
        Error::Validation(_) | Error::DegenerateRow { .. } => VcorrStatus::InvalidArgument,
        Error::Config(_) => VcorrStatus::Config,
        Error::Io(_) => VcorrStatus::Io,
        Error::Format(_) | Error::Image(_) => VcorrStatus::Format,
        Error::TrackingFailure(_) | Error::Aborted(_) => VcorrStatus::Runtime,
    }
}

fn fail(status: VcorrStatus, msg: &str) -> VcorrStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), VcorrStatus>) -> VcorrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VcorrStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(VcorrStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, VcorrStatus>;
}

impl<T> OrStatus<T> for vcorr::Result<T> {
    fn or_status(self) -> Result<T, VcorrStatus> {
        self.map_err(|e| fail(status_of(&e), &e.to_string()))
    }
}

fn null(what: &str) -> VcorrStatus {
    fail(VcorrStatus::NullPointer, &format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, VcorrStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(VcorrStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn image_arg(rgb: *const f32, height: usize, width: usize) -> Result<Image, VcorrStatus> {
    if rgb.is_null() {
        return Err(null("image"));
    }
    if height == 0 || width == 0 {
        return Err(fail(VcorrStatus::InvalidArgument, "image has zero size"));
    }
    let data = std::slice::from_raw_parts(rgb, 3 * height * width);
    let arr = Array3::from_shape_fn((3, height, width), |(c, y, x)| data[(c * height + y) * width + x] as f64);
    Image::new(arr).or_status()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn vcorr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a backbone checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vcorr_backbone_load(path: *const c_char, out: *mut *mut VcorrBackbone) -> VcorrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        let inner = Backbone::load(p).or_status()?;
        *out = Box::into_raw(Box::new(VcorrBackbone { inner }));
        Ok(())
    })
}

/// Creates a randomly initialized small backbone.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vcorr_backbone_new_small(
    stride: usize,
    channels: usize,
    depth: usize,
    seed: u64,
    out: *mut *mut VcorrBackbone,
) -> VcorrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = BackboneConfig { stride, channels, depth, seed, ..BackboneConfig::default() };
        let inner = Backbone::new(cfg).or_status()?;
        *out = Box::into_raw(Box::new(VcorrBackbone { inner }));
        Ok(())
    })
}

/// # Safety
/// `backbone` must come from a `vcorr_backbone_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn vcorr_backbone_free(backbone: *mut VcorrBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Output stride of the backbone, or 0 for a null handle.
///
/// # Safety
/// `backbone` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vcorr_backbone_stride(backbone: *const VcorrBackbone) -> usize {
    backbone.as_ref().map_or(0, |b| b.inner.stride())
}

/// Feature maps of a planar RGB image. Sizes that are not a multiple of the
/// stride are padded by edge repetition.
///
/// # Safety
/// `rgb` must hold `3 * height * width` floats and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vcorr_backbone_forward(
    backbone: *const VcorrBackbone,
    rgb: *const f32,
    height: usize,
    width: usize,
    out: *mut *mut VcorrFeatures,
) -> VcorrStatus {
    guard(|| {
        let bb = backbone.as_ref().ok_or_else(|| null("backbone"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = pad_to_stride(&image_arg(rgb, height, width)?, bb.inner.stride());
        let inner = bb.inner.forward(&img).or_status()?;
        *out = Box::into_raw(Box::new(VcorrFeatures { inner }));
        Ok(())
    })
}

/// # Safety
/// `features` must come from `vcorr_backbone_forward` or be null.
#[no_mangle]
pub unsafe extern "C" fn vcorr_features_free(features: *mut VcorrFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vcorr_features_shape(
    features: *const VcorrFeatures,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> VcorrStatus {
    guard(|| {
        let f = features.as_ref().ok_or_else(|| null("features"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        *channels = f.inner.channels();
        *height = f.inner.height();
        *width = f.inner.width();
        Ok(())
    })
}

/// Copies the `channels x (height * width)` values, row-major, into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vcorr_features_copy(features: *const VcorrFeatures, out: *mut f64, len: usize) -> VcorrStatus {
    guard(|| {
        let f = features.as_ref().ok_or_else(|| null("features"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = f.inner.values();
        if len != v.len() {
            return Err(fail(VcorrStatus::Dimension, &format!("buffer holds {len} values, features have {}", v.len())));
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, s) in dst.iter_mut().zip(v.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Row-stochastic affinity between L2-normalized target and reference
/// features, written row-major as `target cells x reference cells`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vcorr_affinity(
    target: *const VcorrFeatures,
    reference: *const VcorrFeatures,
    temperature: f64,
    mutual: bool,
    out: *mut f64,
    len: usize,
) -> VcorrStatus {
    guard(|| {
        let t = target.as_ref().ok_or_else(|| null("target"))?;
        let r = reference.as_ref().ok_or_else(|| null("reference"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = t.inner.cells() * r.inner.cells();
        if len != need {
            return Err(fail(VcorrStatus::Dimension, &format!("buffer holds {len} values, affinity has {need}")));
        }
        let (tn, rn) = (t.inner.normalized_with_norms().0, r.inner.normalized_with_norms().0);
        let a = if mutual {
            compute_mutual_affinity(&tn, &rn, temperature)
        } else {
            compute_affinity(&tn, &rn, temperature)
        }
        .or_status()?;
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, s) in dst.iter_mut().zip(a.values().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Keeps the `k` largest entries of `row` and renormalizes, in place.
///
/// # Safety
/// `row` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vcorr_knn_filter(row: *mut f64, len: usize, k: usize) -> VcorrStatus {
    guard(|| {
        if row.is_null() {
            return Err(null("row"));
        }
        if k == 0 {
            return Err(fail(VcorrStatus::InvalidArgument, "k must be at least 1"));
        }
        let r = std::slice::from_raw_parts_mut(row, len);
        let filtered = knn_filter(r, k);
        r.copy_from_slice(&filtered);
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vcorr_propagator_new(
    context: usize,
    k: usize,
    temperature: f64,
    mutual: bool,
    out: *mut *mut VcorrPropagator,
) -> VcorrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = PropagationConfig { context, k, temperature, kind: LabelKind::Mask, mutual };
        config.validate().or_status()?;
        *out = Box::into_raw(Box::new(VcorrPropagator { config }));
        Ok(())
    })
}

/// # Safety
/// `propagator` must come from `vcorr_propagator_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn vcorr_propagator_free(propagator: *mut VcorrPropagator) {
    if !propagator.is_null() {
        drop(Box::from_raw(propagator));
    }
}

/// Propagates `first_mask` (class ids, `height x width`) through `count`
/// frames stored back to back. Writes `count` masks to `out_masks`; the first
/// is a copy of `first_mask`.
///
/// # Safety
/// `frames` must hold `count * 3 * height * width` floats, `first_mask` and
/// each output mask `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn vcorr_propagate_masks(
    propagator: *const VcorrPropagator,
    backbone: *const VcorrBackbone,
    frames: *const f32,
    count: usize,
    height: usize,
    width: usize,
    first_mask: *const u8,
    out_masks: *mut u8,
) -> VcorrStatus {
    guard(|| {
        let p = propagator.as_ref().ok_or_else(|| null("propagator"))?;
        let bb = backbone.as_ref().ok_or_else(|| null("backbone"))?;
        if frames.is_null() || first_mask.is_null() || out_masks.is_null() {
            return Err(null("buffer"));
        }
        if count == 0 {
            return Err(fail(VcorrStatus::InvalidArgument, "no frames"));
        }
        let s = bb.inner.stride();
        let plane = 3 * height * width;
        let images: Vec<Image> = (0..count)
            .map(|t| image_arg(frames.add(t * plane), height, width).map(|i| pad_to_stride(&i, s)))
            .collect::<Result<_, _>>()?;
        let (ph, pw) = (images[0].height(), images[0].width());
        let mask = std::slice::from_raw_parts(first_mask, height * width);
        let padded = Array2::from_shape_fn((ph, pw), |(y, x)| mask[y.min(height - 1) * width + x.min(width - 1)]);
        let features = frame_features(&bb.inner, &images).or_status()?;
        let masks = propagate_masks(&features, &padded, s, &p.config).or_status()?;
        let dst = std::slice::from_raw_parts_mut(out_masks, count * height * width);
        for (t, m) in masks.iter().enumerate() {
            for y in 0..height {
                for x in 0..width {
                    dst[(t * height + y) * width + x] = m[[y, x]];
                }
            }
        }
        Ok(())
    })
}

/// Intersection over union of two binary masks (non-zero is foreground).
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vcorr_jaccard(pred: *const u8, gt: *const u8, len: usize, out: *mut f64) -> VcorrStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let p = Array2::from_shape_vec((1, len), std::slice::from_raw_parts(pred, len).iter().map(|&v| v != 0).collect())
            .expect("shape");
        let g = Array2::from_shape_vec((1, len), std::slice::from_raw_parts(gt, len).iter().map(|&v| v != 0).collect())
            .expect("shape");
        *out = jaccard(&p, &g).or_status()?;
        Ok(())
    })
}
