//! C ABI over the `styleless` crate.
//!
//! Every fallible call returns an [`StlStatus`]; on failure a message is
//! available from [`stl_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Tensors are `float32`, label maps `uint8`, both
//! row-major.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use styleless::checkpoint::Checkpoint;
use styleless::eval::{ConfusionMatrix, FOREGROUND};
use styleless::filters::{apply_filter, FilterConfig, FilterKind};
use styleless::model::{ForwardOptions, LayeredNetwork, NUM_CLASSES};
use styleless::nn::{GroupSelector, ParamGroup};
use styleless::style::{gram, gram_loss, gram_matrix, FeatureMap};
use styleless::toyscenes::{corrupt, generate_scene, CorruptionKind, CorruptionSpec};
use styleless::{stls, Error, Tape, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    Internal = 7,
}

pub const STL_FILTER_REMOVE: u32 = 0;
pub const STL_FILTER_WEIGHTING: u32 = 1;
pub const STL_FILTER_NOISE: u32 = 2;

pub const STL_CORRUPTION_HAZE: u32 = 0;
pub const STL_CORRUPTION_RAIN: u32 = 1;
pub const STL_CORRUPTION_GAUSS_NOISE: u32 = 2;
pub const STL_CORRUPTION_GAUSS_BLUR: u32 = 3;
pub const STL_CORRUPTION_CONTRAST: u32 = 4;

pub const STL_GROUP_ALL: u32 = 0;
pub const STL_GROUP_BACKBONE: u32 = 1;
pub const STL_GROUP_STYLELESS: u32 = 2;

/// Opaque `float32` tensor.
pub struct StlTensor(Tensor<f32>);

/// Opaque `uint8` label map.
pub struct StlLabels(Tensor<u8>);

/// Opaque segmentation network.
pub struct StlNetwork(LayeredNetwork<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StlStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::ChannelMismatch { .. } => StlStatus::Shape,
        Error::Io(_) => StlStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Dataset { .. } => StlStatus::Format,
        Error::Checkpoint { .. } | Error::ArchitectureMismatch { .. } => StlStatus::Checkpoint,
        _ => StlStatus::InvalidArgument,
    }
}

struct Fail(StlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> StlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            StlStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(StlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(StlStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy `len` floats from `data` into a new tensor of the given shape.
#[no_mangle]
pub unsafe extern "C" fn stl_tensor_new(shape: *const usize, ndim: usize, data: *const f32, len: usize, out: *mut *mut StlTensor) -> StlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        if (ndim > 0 && shape.is_null()) || (len > 0 && data.is_null()) {
            return Err(null("shape or data"));
        }
        let shape = if ndim == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(shape, ndim) } };
        let data = if len == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(data, len) } };
        *out = boxed(StlTensor(Tensor::new(shape.to_vec(), data.to_vec())?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn stl_tensor_free(t: *mut StlTensor) {
    if !t.is_null() {
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Number of dimensions; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn stl_tensor_ndim(t: *const StlTensor) -> usize {
    unsafe { t.as_ref() }.map_or(0, |t| t.0.shape().len())
}

/// Number of elements; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn stl_tensor_len(t: *const StlTensor) -> usize {
    unsafe { t.as_ref() }.map_or(0, |t| t.0.numel())
}

/// Write the shape into `dims`, which must hold `stl_tensor_ndim(t)` entries.
#[no_mangle]
pub unsafe extern "C" fn stl_tensor_shape(t: *const StlTensor, dims: *mut usize, cap: usize) -> StlStatus {
    guard(|| {
        let t = unsafe { deref(t, "tensor") }?;
        let shape = t.0.shape();
        if cap < shape.len() || dims.is_null() {
            return Err(Fail(StlStatus::InvalidArgument, format!("shape needs {} slots", shape.len())));
        }
        unsafe { std::slice::from_raw_parts_mut(dims, shape.len()) }.copy_from_slice(shape);
        Ok(())
    })
}

/// Borrowed pointer to the tensor's elements, valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn stl_tensor_data(t: *const StlTensor) -> *const f32 {
    unsafe { t.as_ref() }.map_or(ptr::null(), |t| t.0.data().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn stl_tensor_load(path: *const c_char, out: *mut *mut StlTensor) -> StlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = boxed(StlTensor(stls::load(unsafe { path_arg(path) }?)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn stl_tensor_save(t: *const StlTensor, path: *const c_char) -> StlStatus {
    guard(|| {
        let t = unsafe { deref(t, "tensor") }?;
        stls::save(&t.0, unsafe { path_arg(path) }?)?;
        Ok(())
    })
}

/// Normalized Gram matrix `(c, c)` of a `(c, h, w)` feature map.
#[no_mangle]
pub unsafe extern "C" fn stl_gram(features: *const StlTensor, out: *mut *mut StlTensor) -> StlStatus {
    guard(|| {
        let f = unsafe { deref(features, "features") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let g = gram_matrix(&FeatureMap::new(0, f.0.clone())?)?;
        *out = boxed(StlTensor(g.values));
        Ok(())
    })
}

/// Gram loss over `n` layers given input and output feature maps.
#[no_mangle]
pub unsafe extern "C" fn stl_gram_loss(
    features_in: *const *const StlTensor,
    features_out: *const *const StlTensor,
    n: usize,
    out: *mut f64,
) -> StlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        if features_in.is_null() || features_out.is_null() {
            return Err(null("feature arrays"));
        }
        let ins = unsafe { std::slice::from_raw_parts(features_in, n) };
        let outs = unsafe { std::slice::from_raw_parts(features_out, n) };
        let mut tape = Tape::<f64>::new();
        let mut pairs = Vec::with_capacity(n);
        for (&a, &b) in ins.iter().zip(outs) {
            let a = tape.constant(unsafe { deref(a, "feature map") }?.0.cast());
            let b = tape.constant(unsafe { deref(b, "feature map") }?.0.cast());
            let (ga, gb) = (gram(&mut tape, a)?, gram(&mut tape, b)?);
            pairs.push((ga, gb));
        }
        let loss = gram_loss(&mut tape, &pairs)?;
        *out = tape.value(loss).item();
        Ok(())
    })
}

fn filter_kind(kind: u32) -> FfiResult<FilterKind> {
    match kind {
        STL_FILTER_REMOVE => Ok(FilterKind::Remove),
        STL_FILTER_WEIGHTING => Ok(FilterKind::Weighting),
        STL_FILTER_NOISE => Ok(FilterKind::Noise),
        k => Err(Fail(StlStatus::InvalidArgument, format!("unknown filter kind {k}"))),
    }
}

fn corruption_kind(kind: u32) -> FfiResult<CorruptionKind> {
    CorruptionKind::ALL
        .get(kind as usize)
        .copied()
        .ok_or_else(|| Fail(StlStatus::InvalidArgument, format!("unknown corruption kind {kind}")))
}

/// Apply a style-perturbation filter (`STL_FILTER_*`) to a `(c, h, w)` map.
#[no_mangle]
pub unsafe extern "C" fn stl_filter_apply(
    features: *const StlTensor,
    kind: u32,
    p: f64,
    tau: f64,
    seed: u64,
    out: *mut *mut StlTensor,
) -> StlStatus {
    guard(|| {
        let f = unsafe { deref(features, "features") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let cfg = FilterConfig { kind: filter_kind(kind)?, p, tau, seed };
        let filtered = apply_filter(&FeatureMap::new(0, f.0.clone())?, &cfg)?;
        *out = boxed(StlTensor(filtered.values));
        Ok(())
    })
}

/// Procedural scene: a `(3, 64, 64)` image and its `(64, 64)` labels.
#[no_mangle]
pub unsafe extern "C" fn stl_scene_generate(seed: u64, image: *mut *mut StlTensor, labels: *mut *mut StlLabels) -> StlStatus {
    guard(|| {
        let image = unsafe { out_ptr(image, "image") }?;
        let labels = unsafe { out_ptr(labels, "labels") }?;
        let s = generate_scene(seed);
        *image = boxed(StlTensor(s.image));
        *labels = boxed(StlLabels(s.labels));
        Ok(())
    })
}

/// Corrupt an RGB image with `STL_CORRUPTION_*` at severity 1..=5.
#[no_mangle]
pub unsafe extern "C" fn stl_corrupt(image: *const StlTensor, kind: u32, severity: u8, seed: u64, out: *mut *mut StlTensor) -> StlStatus {
    guard(|| {
        let image = unsafe { deref(image, "image") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let spec = CorruptionSpec::new(corruption_kind(kind)?, severity, seed)?;
        *out = boxed(StlTensor(corrupt(&image.0, &spec)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn stl_labels_free(l: *mut StlLabels) {
    if !l.is_null() {
        drop(unsafe { Box::from_raw(l) });
    }
}

/// Height and width of a label map.
#[no_mangle]
pub unsafe extern "C" fn stl_labels_shape(l: *const StlLabels, height: *mut usize, width: *mut usize) -> StlStatus {
    guard(|| {
        let l = unsafe { deref(l, "labels") }?;
        let (h, w) = l.0.dims2()?;
        *unsafe { out_ptr(height, "height") }? = h;
        *unsafe { out_ptr(width, "width") }? = w;
        Ok(())
    })
}

/// Borrowed pointer to the labels, valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn stl_labels_data(l: *const StlLabels) -> *const u8 {
    unsafe { l.as_ref() }.map_or(ptr::null(), |l| l.0.data().as_ptr())
}

/// Copy `height * width` labels into a new label map.
#[no_mangle]
pub unsafe extern "C" fn stl_labels_new(height: usize, width: usize, data: *const u8, out: *mut *mut StlLabels) -> StlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let n = height * width;
        if n > 0 && data.is_null() {
            return Err(null("data"));
        }
        let data = if n == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(data, n) } };
        *out = boxed(StlLabels(Tensor::new([height, width], data.to_vec())?));
        Ok(())
    })
}

/// Mean IoU over road, vehicle and vulnerable; pixels labeled 255 are
/// ignored. Writes NaN when none of the classes occurs.
#[no_mangle]
pub unsafe extern "C" fn stl_miou(preds: *const StlLabels, labels: *const StlLabels, out: *mut f64) -> StlStatus {
    guard(|| {
        let preds = unsafe { deref(preds, "preds") }?;
        let labels = unsafe { deref(labels, "labels") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let mut cm = ConfusionMatrix::new(NUM_CLASSES);
        cm.accumulate(&preds.0, &labels.0)?;
        *out = cm.mean_iou(&FOREGROUND).unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Load a checkpoint directory.
#[no_mangle]
pub unsafe extern "C" fn stl_network_load(path: *const c_char, out: *mut *mut StlNetwork) -> StlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = boxed(StlNetwork(Checkpoint::load(unsafe { path_arg(path) }?)?.network));
        Ok(())
    })
}

/// Freshly initialized backbone with the default widths.
#[no_mangle]
pub unsafe extern "C" fn stl_network_new(seed: u64, out: *mut *mut StlNetwork) -> StlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = boxed(StlNetwork(LayeredNetwork::new(seed)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn stl_network_free(n: *mut StlNetwork) {
    if !n.is_null() {
        drop(unsafe { Box::from_raw(n) });
    }
}

/// Insert StyleLess layers (identity at insertion).
#[no_mangle]
pub unsafe extern "C" fn stl_network_insert_styleless(n: *mut StlNetwork, seed: u64) -> StlStatus {
    guard(|| {
        unsafe { out_ptr(n, "network") }?.0.insert_styleless(seed)?;
        Ok(())
    })
}

/// Parameter count of an `STL_GROUP_*` selection.
#[no_mangle]
pub unsafe extern "C" fn stl_network_parameter_count(n: *const StlNetwork, group: u32, out: *mut usize) -> StlStatus {
    guard(|| {
        let n = unsafe { deref(n, "network") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let sel = match group {
            STL_GROUP_ALL => GroupSelector::All,
            STL_GROUP_BACKBONE => GroupSelector::Only(ParamGroup::Backbone),
            STL_GROUP_STYLELESS => GroupSelector::Only(ParamGroup::StyleLess),
            g => return Err(Fail(StlStatus::InvalidArgument, format!("unknown parameter group {g}"))),
        };
        *out = n.0.count_parameters(sel);
        Ok(())
    })
}

/// Per-pixel class prediction for a `(3, H, W)` image.
#[no_mangle]
pub unsafe extern "C" fn stl_network_predict(n: *const StlNetwork, image: *const StlTensor, out: *mut *mut StlLabels) -> StlStatus {
    guard(|| {
        let n = unsafe { deref(n, "network") }?;
        let image = unsafe { deref(image, "image") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        *out = boxed(StlLabels(n.0.predict(&image.0, &ForwardOptions::default())?));
        Ok(())
    })
}

/// Class logits `(4, H, W)` for a `(3, H, W)` image.
#[no_mangle]
pub unsafe extern "C" fn stl_network_logits(n: *const StlNetwork, image: *const StlTensor, out: *mut *mut StlTensor) -> StlStatus {
    guard(|| {
        let n = unsafe { deref(n, "network") }?;
        let image = unsafe { deref(image, "image") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        *out = boxed(StlTensor(n.0.logits(&image.0, &ForwardOptions::default())?));
        Ok(())
    })
}
