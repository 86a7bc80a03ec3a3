//! C ABI over the drape runtime.
//!
//! Every call returns a [`DrapeStatus`]. On failure a human-readable message
//! is kept per thread and can be read with [`drape_last_error`]. Models are
//! opaque [`DrapeModel`] handles created by [`drape_model_load`] and released
//! with [`drape_model_free`]. Output buffers are caller-owned; lengths are in
//! elements, not bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use drape::body::{load_body, BodyModel};
use drape::model::{load_garment, Checkpoint, CheckpointMode, ModelError, PbnsModel};
use drape::resizer::{resize_forward, ResizeModel, ResizeSample};
use drape::rig::{BlendWeights, Pose};
use drape::tensor::TensorError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrapeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    HashMismatch = 6,
    WrongMode = 7,
    NonFinite = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrapeModelKind {
    Pose = 0,
    Resize = 1,
}

/// Sizes needed to allocate input and output buffers.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct DrapeModelInfo {
    pub kind: u32,
    pub vertices: usize,
    pub faces: usize,
    /// Joints in a pose; each contributes three axis-angle values.
    pub joints: usize,
    /// Shape coefficients accepted by the resizer (0 for pose models).
    pub shape_params: usize,
}

enum Inner {
    Pose {
        model: PbnsModel,
        weights: BlendWeights,
    },
    Resize {
        model: ResizeModel,
    },
}

/// Opaque model handle.
pub struct DrapeModel {
    inner: Inner,
    body: BodyModel,
}

impl DrapeModel {
    fn garment(&self) -> &drape::model::GarmentTemplate {
        match &self.inner {
            Inner::Pose { model, .. } => model.garment(),
            Inner::Resize { model } => model.garment(),
        }
    }
}

struct Failure(DrapeStatus, String);

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::HashMismatch { .. } => DrapeStatus::HashMismatch,
            ModelError::Mode { .. } => DrapeStatus::WrongMode,
            ModelError::Io(_) => DrapeStatus::Io,
            ModelError::Tensor(TensorError::NonFinite { .. }) => DrapeStatus::NonFinite,
            ModelError::Rig(_) => DrapeStatus::InvalidArgument,
            _ => DrapeStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrapeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DrapeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            DrapeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DrapeStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(DrapeStatus::InvalidArgument, msg)
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const DrapeModel) -> Result<&'a DrapeModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, need: usize) -> Result<&'a mut [T], Failure> {
    if len < need {
        return Err(Failure(
            DrapeStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {need} needed"),
        ));
    }
    if p.is_null() {
        return Err(null("output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn write_points(out: &mut [f64], pts: &[[f64; 3]]) {
    for (dst, p) in out.chunks_exact_mut(3).zip(pts) {
        dst.copy_from_slice(p);
    }
}

fn pose_from(theta: &[f64], joints: usize, translation: Option<[f64; 3]>) -> Result<Pose, Failure> {
    if theta.len() != 3 * joints {
        return Err(invalid(format!(
            "pose has {} values, expected {} ({joints} joints x 3)",
            theta.len(),
            3 * joints
        )));
    }
    let theta = theta.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Pose::new(theta, translation).map_err(|e| invalid(e.to_string()))
}

fn load(ckpt: PathBuf, body: PathBuf, garment: PathBuf, force: bool) -> Result<DrapeModel, Failure> {
    let checkpoint = Checkpoint::load(&ckpt)?;
    let body = load_body(&body).map_err(|e| Failure(DrapeStatus::Format, format!("body: {e}")))?;
    let garment = Arc::new(load_garment(&garment)?);
    let inner = match checkpoint.mode {
        CheckpointMode::Pose => {
            let model = PbnsModel::from_checkpoint(&checkpoint, garment, &body, force)?;
            let weights = model.skin_weights()?;
            Inner::Pose { model, weights }
        }
        CheckpointMode::Resize => Inner::Resize {
            model: ResizeModel::from_checkpoint(&checkpoint, garment, &body, force)?,
        },
    };
    Ok(DrapeModel { inner, body })
}

/// Static version string of the library.
#[no_mangle]
pub extern "C" fn drape_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message from the latest call on this thread; empty after a success. The
/// pointer stays valid until the next drape call on the same thread.
#[no_mangle]
pub extern "C" fn drape_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a pose or resize checkpoint together with its body and garment.
/// With `force` false, a checkpoint whose recorded garment or body hash
/// differs from the given files is rejected with `HashMismatch`.
///
/// # Safety
/// Paths must be null or NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drape_model_load(
    checkpoint: *const c_char,
    body: *const c_char,
    garment: *const c_char,
    force: bool,
    out: *mut *mut DrapeModel,
) -> DrapeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let model = load(
            path_arg(checkpoint, "checkpoint path")?,
            path_arg(body, "body path")?,
            path_arg(garment, "garment path")?,
            force,
        )?;
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`drape_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn drape_model_free(model: *mut DrapeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drape_model_info(model: *const DrapeModel, info: *mut DrapeModelInfo) -> DrapeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let g = m.garment();
        *info = DrapeModelInfo {
            kind: match m.inner {
                Inner::Pose { .. } => DrapeModelKind::Pose as u32,
                Inner::Resize { .. } => DrapeModelKind::Resize as u32,
            },
            vertices: g.vertex_count(),
            faces: g.mesh().faces().len(),
            joints: m.body.skeleton.len(),
            shape_params: match &m.inner {
                Inner::Pose { .. } => 0,
                Inner::Resize { .. } => m.body.shape_count(),
            },
        };
        Ok(())
    })
}

/// Copies the garment triangles as `3 * faces` vertex indices.
///
/// # Safety
/// `out` must point to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn drape_model_faces(model: *const DrapeModel, out: *mut u32, out_len: usize) -> DrapeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let faces = m.garment().mesh().faces();
        let out = output(out, out_len, 3 * faces.len())?;
        for (dst, f) in out.chunks_exact_mut(3).zip(faces) {
            for c in 0..3 {
                dst[c] = u32::try_from(f[c]).map_err(|_| invalid("vertex index exceeds u32".into()))?;
            }
        }
        Ok(())
    })
}

/// Posed outfit for one pose. `theta` holds `3 * joints` axis-angle values;
/// `translation` is null or three values. Writes `3 * vertices` coordinates.
///
/// # Safety
/// Pointers must be null or valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn drape_pose_outfit(
    model: *const DrapeModel,
    theta: *const f64,
    theta_len: usize,
    translation: *const f64,
    out: *mut f64,
    out_len: usize,
) -> DrapeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let Inner::Pose { model, weights } = &m.inner else {
            return Err(Failure(DrapeStatus::WrongMode, "model is a resizer".into()));
        };
        let translation = (!translation.is_null()).then(|| {
            let t = std::slice::from_raw_parts(translation, 3);
            [t[0], t[1], t[2]]
        });
        let pose = pose_from(input(theta, theta_len, "theta")?, m.body.skeleton.len(), translation)?;
        let out = output(out, out_len, 3 * model.garment().vertex_count())?;
        let mut posed = model.pose_outfits_with(std::slice::from_ref(&pose), weights)?;
        write_points(out, &posed.pop().expect("one pose"));
        Ok(())
    })
}

/// Batched form of [`drape_pose_outfit`] without translation. `thetas` holds
/// `count` poses back to back; `out` receives `count * 3 * vertices` values.
/// Each pose's output equals the single-pose call bit for bit.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn drape_pose_outfits(
    model: *const DrapeModel,
    thetas: *const f64,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> DrapeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let Inner::Pose { model, weights } = &m.inner else {
            return Err(Failure(DrapeStatus::WrongMode, "model is a resizer".into()));
        };
        let k = m.body.skeleton.len();
        let flat = input(thetas, count * 3 * k, "thetas")?;
        let poses = flat
            .chunks_exact(3 * k.max(1))
            .map(|c| pose_from(c, k, None))
            .collect::<Result<Vec<_>, _>>()?;
        let n = model.garment().vertex_count();
        let out = output(out, out_len, count * 3 * n)?;
        // SAFETY: `[f64; 3]` has the layout of three consecutive f64.
        let points = std::slice::from_raw_parts_mut(out.as_mut_ptr().cast::<[f64; 3]>(), count * n);
        model.pose_outfits_into(&poses, weights, points)?;
        Ok(())
    })
}

/// Resized outfit for shape `beta` (`beta_len` values) and a two-value
/// tightness `gamma`. When `body_out` is non-null the reshaped body rest
/// mesh is written there as well.
///
/// # Safety
/// Pointers must be null or valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn drape_resize_forward(
    model: *const DrapeModel,
    beta: *const f64,
    beta_len: usize,
    gamma: *const f64,
    out: *mut f64,
    out_len: usize,
    body_out: *mut f64,
    body_out_len: usize,
) -> DrapeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let Inner::Resize { model } = &m.inner else {
            return Err(Failure(DrapeStatus::WrongMode, "model is a pose model".into()));
        };
        let g = input(gamma, 2, "gamma")?;
        let s = ResizeSample {
            beta: input(beta, beta_len, "beta")?.to_vec(),
            gamma: [g[0], g[1]],
        };
        model.check(&s).map_err(|e| invalid(e.to_string()))?;
        let out = output(out, out_len, 3 * model.garment().vertex_count())?;
        let (outfit, shaped) = resize_forward(model, &m.body, &s)?;
        write_points(out, &outfit);
        if !body_out.is_null() {
            let b = output(body_out, body_out_len, 3 * shaped.len())?;
            write_points(b, &shaped);
        }
        Ok(())
    })
}
