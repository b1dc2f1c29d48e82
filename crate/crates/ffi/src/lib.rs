//! C ABI over the `atlasseg` library.
//!
//! Objects cross the boundary as opaque handles created by `*_read`/`*_new`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`AtlassegStatus`]; on failure a description is available from
//! [`atlasseg_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use atlasseg::em::{em_fit, init_params, EmSettings};
use atlasseg::error::ErrorKind;
use atlasseg::io;
use atlasseg::network::NetworkParams;
use atlasseg::segment::{dice, segment, segment_warped};
use atlasseg::{Error, GaussianParams, GridShape, LabelMap, ModelConfig, ProbAtlas, Volume};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtlassegStatus {
    Ok = 0,
    InvalidArgument = 1,
    Data = 2,
    Numerical = 3,
    NullPointer = 4,
    Panic = 5,
}

/// Scalar image.
pub struct AtlassegVolume(Volume);
/// Probabilistic atlas with its label grouping.
pub struct AtlassegAtlas(ProbAtlas);
/// Label map.
pub struct AtlassegLabels(LabelMap);
/// Trained network checkpoint.
pub struct AtlassegNetwork(NetworkParams);
/// Per-class Gaussian means and variances.
pub struct AtlassegParams(GaussianParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AtlassegStatus {
    match e.kind() {
        ErrorKind::Usage => AtlassegStatus::InvalidArgument,
        ErrorKind::Data => AtlassegStatus::Data,
        ErrorKind::Numerical => AtlassegStatus::Numerical,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AtlassegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AtlassegStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AtlassegStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            AtlassegStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn atlasseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a `.vol` scalar volume.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_volume_read(path: *const c_char, out: *mut *mut AtlassegVolume) -> AtlassegStatus {
    guard(|| put(out, AtlassegVolume(io::read_volume(&path_arg(path)?)?)))
}

/// Creates a volume from `len` row-major values over `ndim` (2 or 3) dims.
///
/// # Safety
/// `dims` must point to `ndim` values and `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_volume_new(
    dims: *const usize,
    ndim: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut AtlassegVolume,
) -> AtlassegStatus {
    guard(|| {
        if dims.is_null() || data.is_null() {
            return Err(Failure::Null("dims/data"));
        }
        let dims = std::slice::from_raw_parts(dims, ndim);
        let data = std::slice::from_raw_parts(data, len).to_vec();
        let shape = GridShape::new(dims)?;
        put(out, AtlassegVolume(Volume::new(shape, data)?))
    })
}

/// Number of voxels, or 0 for NULL.
///
/// # Safety
/// `v` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_volume_num_voxels(v: *const AtlassegVolume) -> usize {
    v.as_ref().map_or(0, |v| v.0.shape().num_voxels())
}

/// # Safety
/// `v` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_volume_free(v: *mut AtlassegVolume) {
    free(v)
}

/// Reads a probabilistic atlas.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_atlas_read(path: *const c_char, out: *mut *mut AtlassegAtlas) -> AtlassegStatus {
    guard(|| put(out, AtlassegAtlas(io::read_atlas(&path_arg(path)?)?)))
}

/// Number of labels, or 0 for NULL.
///
/// # Safety
/// `a` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_atlas_num_labels(a: *const AtlassegAtlas) -> usize {
    a.as_ref().map_or(0, |a| a.0.num_labels())
}

/// # Safety
/// `a` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_atlas_free(a: *mut AtlassegAtlas) {
    free(a)
}

/// Reads a label map.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_labels_read(path: *const c_char, out: *mut *mut AtlassegLabels) -> AtlassegStatus {
    guard(|| put(out, AtlassegLabels(io::read_labels(&path_arg(path)?)?)))
}

/// Writes a label map as a `.vol` pair.
///
/// # Safety
/// `labels` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_labels_write(labels: *const AtlassegLabels, path: *const c_char) -> AtlassegStatus {
    guard(|| Ok(io::write_labels(&as_ref(labels, "labels")?.0, &path_arg(path)?)?))
}

/// Copies the labels into `out`, which must hold `len >= num_voxels` values.
///
/// # Safety
/// `labels` must be a live handle; `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_labels_copy(labels: *const AtlassegLabels, out: *mut u32, len: usize) -> AtlassegStatus {
    guard(|| {
        let l = as_ref(labels, "labels")?.0.labels();
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if len < l.len() {
            return Err(Error::InvalidArgument(format!("buffer holds {len} labels, need {}", l.len())).into());
        }
        std::slice::from_raw_parts_mut(out, l.len()).copy_from_slice(l);
        Ok(())
    })
}

/// # Safety
/// `l` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_labels_free(l: *mut AtlassegLabels) {
    free(l)
}

/// Copies up to `capacity` class means and variances into `mu`/`var` and
/// stores the number of classes in `num_classes`.
///
/// # Safety
/// `params` must be a live handle; `mu` and `var` must hold `capacity`
/// values; `num_classes` must be valid.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_params_get(
    params: *const AtlassegParams,
    mu: *mut f64,
    var: *mut f64,
    capacity: usize,
    num_classes: *mut usize,
) -> AtlassegStatus {
    guard(|| {
        let p = &as_ref(params, "params")?.0;
        if mu.is_null() || var.is_null() || num_classes.is_null() {
            return Err(Failure::Null("mu/var/num_classes"));
        }
        let c = p.num_classes();
        *num_classes = c;
        if capacity < c {
            return Err(Error::InvalidArgument(format!("buffers hold {capacity} classes, need {c}")).into());
        }
        std::slice::from_raw_parts_mut(mu, c).copy_from_slice(&p.mu);
        std::slice::from_raw_parts_mut(var, c).copy_from_slice(&p.var);
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_params_free(p: *mut AtlassegParams) {
    free(p)
}

/// EM fit of the Gaussian parameters under the undeformed atlas, from the
/// atlas-weighted initialization. The variance floor is `1e-6 * range^2`.
///
/// # Safety
/// `img` and `atlas` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_em_fit(
    img: *const AtlassegVolume,
    atlas: *const AtlassegAtlas,
    max_iter: usize,
    out: *mut *mut AtlassegParams,
) -> AtlassegStatus {
    guard(|| {
        let (img, atlas) = (&as_ref(img, "img")?.0, &as_ref(atlas, "atlas")?.0);
        let (lo, hi) = img.range();
        let floor = ModelConfig::default().with_intensity_range((hi - lo) as f64).var_floor;
        let init = init_params(img, atlas, floor)?;
        let settings = EmSettings {
            max_iter,
            tol: None,
            var_floor: floor,
        };
        put(out, AtlassegParams(em_fit(img, atlas, &init, &settings)?.params))
    })
}

/// Voxel-wise MAP labels under the undeformed atlas and fixed parameters.
///
/// # Safety
/// All handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_segment_params(
    img: *const AtlassegVolume,
    atlas: *const AtlassegAtlas,
    params: *const AtlassegParams,
    out: *mut *mut AtlassegLabels,
) -> AtlassegStatus {
    guard(|| {
        let seg = segment_warped(
            &as_ref(img, "img")?.0,
            &as_ref(atlas, "atlas")?.0,
            &as_ref(params, "params")?.0,
        )?;
        put(out, AtlassegLabels(seg))
    })
}

/// Loads a network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_network_load(path: *const c_char, out: *mut *mut AtlassegNetwork) -> AtlassegStatus {
    guard(|| put(out, AtlassegNetwork(NetworkParams::load(&path_arg(path)?)?)))
}

/// # Safety
/// `n` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_network_free(n: *mut AtlassegNetwork) {
    free(n)
}

/// One network forward pass followed by segmentation. `params_out` may be
/// NULL; otherwise it receives the predicted Gaussian parameters.
///
/// # Safety
/// All handles must be live; `out` a valid pointer; `params_out` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_network_segment(
    net: *const AtlassegNetwork,
    img: *const AtlassegVolume,
    atlas: *const AtlassegAtlas,
    out: *mut *mut AtlassegLabels,
    params_out: *mut *mut AtlassegParams,
) -> AtlassegStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.0;
        let (img, atlas) = (&as_ref(img, "img")?.0, &as_ref(atlas, "atlas")?.0);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (v, params) = net.forward(img, atlas)?;
        let cfg = ModelConfig {
            velocity_stride: net.descriptor().velocity_stride,
            ..ModelConfig::default()
        };
        let seg = segment(img, atlas, &v, &params, &cfg)?;
        put(out, AtlassegLabels(seg))?;
        if !params_out.is_null() {
            put(params_out, AtlassegParams(params))?;
        }
        Ok(())
    })
}

/// Dice overlap of `label` between two label maps.
///
/// # Safety
/// `a` and `b` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atlasseg_dice(
    a: *const AtlassegLabels,
    b: *const AtlassegLabels,
    label: u32,
    out: *mut f64,
) -> AtlassegStatus {
    guard(|| {
        let d = dice(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0, label)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = d;
        Ok(())
    })
}
