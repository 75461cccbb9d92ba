//! C ABI over `seglift`.
//!
//! Every fallible call returns a [`SegliftStatus`]; on failure the message is available from
//! [`seglift_last_error_message`] on the same thread until the next failing call. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use seglift::error::Error;
use seglift::eval::segment;
use seglift::fields::{ObjectField, RadianceField};
use seglift::geometry::Camera;
use seglift::image::Bitmap;
use seglift::matching::{hungarian_match, AffinityMatrix};
use seglift::render::{render_image, FieldSource, SamplingConfig};
use seglift::train::Checkpoint;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegliftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Capacity = 5,
    Numerical = 6,
    Panic = 7,
}

/// A trained model loaded from a checkpoint.
pub struct SegliftModel {
    radiance: RadianceField<f32>,
    objects: Option<ObjectField<f32>>,
    sampling: SamplingConfig,
}

/// Camera in the dataset convention: row-major 4x4 camera-to-world, pinhole intrinsics.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SegliftCamera {
    pub camera_to_world: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SegliftStatus {
    match e {
        Error::Io { .. } => SegliftStatus::Io,
        Error::Capacity { .. } => SegliftStatus::Capacity,
        Error::Divergence { .. } | Error::NonFinite(_) => SegliftStatus::Numerical,
        Error::Data(_) => SegliftStatus::Format,
        _ => SegliftStatus::InvalidArgument,
    }
}

struct Fail(SegliftStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SegliftStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SegliftStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SegliftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SegliftStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            SegliftStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failing call on this thread; empty if none. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn seglift_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seglift_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint written by `seglift train-nerf` or `seglift train-objects`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seglift_model_load(path: *const c_char, out: *mut *mut SegliftModel) -> SegliftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let objects = if ck.has_objects() { Some(ck.object_field()?) } else { None };
        let model = SegliftModel {
            radiance: ck.radiance_field()?,
            objects,
            sampling: SamplingConfig::default(),
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`seglift_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seglift_model_free(model: *mut SegliftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of object slots; 0 when the checkpoint has no object field.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seglift_model_num_slots(model: *const SegliftModel, out: *mut u32) -> SegliftStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.objects.as_ref().map_or(0, |o| o.num_slots as u32);
        Ok(())
    })
}

/// Sets samples per ray (coarse and fine passes) and the background colour.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn seglift_model_set_sampling(
    model: *mut SegliftModel,
    coarse_samples: u32,
    fine_samples: u32,
    background_r: f64,
    background_g: f64,
    background_b: f64,
) -> SegliftStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let mut s = m.sampling.clone();
        s.coarse_samples = coarse_samples as usize;
        s.fine_samples = fine_samples as usize;
        s.background = [background_r, background_g, background_b];
        s.validate()?;
        m.sampling = s;
        Ok(())
    })
}

/// Renders one view deterministically.
///
/// `rgb` receives `width * height * 3` floats in row-major order. `labels`, when not null,
/// receives `width * height` slot labels (slot + 1, 0 for background) and requires an object
/// field.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn seglift_model_render(
    model: *const SegliftModel,
    camera: *const SegliftCamera,
    rgb: *mut f32,
    labels: *mut u32,
) -> SegliftStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = camera.as_ref().ok_or_else(|| null("camera"))?;
        let mut c2w = [[0.0; 4]; 4];
        for (i, row) in c2w.iter_mut().enumerate() {
            row.copy_from_slice(&c.camera_to_world[i * 4..i * 4 + 4]);
        }
        let cam = Camera::new(c2w, c.fx, c.fy, (c.cx, c.cy), c.width as usize, c.height as usize)?;
        let px = cam.width * cam.height;
        let rgb = slice_mut(rgb, px * 3, "rgb")?;
        if !labels.is_null() && m.objects.is_none() {
            return Err(invalid("labels requested but the model has no object field"));
        }
        let source = FieldSource::new(&m.radiance, m.objects.as_ref());
        let (img, probs) = render_image(&cam, &source, &m.sampling.deterministic(), 0)?;
        rgb.copy_from_slice(&img.data);
        if !labels.is_null() {
            let out = slice_mut(labels, px, "labels")?;
            out.copy_from_slice(&segment(&probs).data);
        }
        Ok(())
    })
}

/// IoU of two binary masks given as `len` bytes (nonzero = inside). Two empty masks give 0.
///
/// # Safety
/// `a` and `b` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn seglift_mask_iou(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> SegliftStatus {
    guard(|| {
        let a = slice(a, len, "a")?;
        let b = slice(b, len, "b")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let bm = |v: &[u8]| Bitmap::from_fn(len, 1, |_, c| v[c] != 0);
        *out = seglift::eval::iou(&bm(a), &bm(b));
        Ok(())
    })
}

/// Optimal injective assignment of `rows` masks to `cols` slots maximising total affinity.
///
/// `affinity` is row-major `rows x cols`; `assignment[m]` receives the slot of mask `m`.
/// Fails with `SEGLIFT_STATUS_CAPACITY` when `rows > cols`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn seglift_hungarian(
    affinity: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut u32,
    total: *mut f64,
) -> SegliftStatus {
    guard(|| {
        if rows > cols {
            return Err(Fail(SegliftStatus::Capacity, format!("{rows} masks exceed {cols} slots")));
        }
        let values = slice(affinity, rows * cols, "affinity")?.to_vec();
        let out = slice_mut(assignment, rows, "assignment")?;
        let r = hungarian_match(&AffinityMatrix::new(rows, cols, values)?)?;
        for (o, g) in out.iter_mut().zip(&r.gamma) {
            *o = *g as u32;
        }
        if let Some(t) = total.as_mut() {
            *t = r.total_affinity;
        }
        Ok(())
    })
}
