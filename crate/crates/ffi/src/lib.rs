//! C ABI for the mvcount engine.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`MvcStatus`]; on failure [`mvc_last_error`] describes the most recent
//! error on the calling thread. Panics are caught and reported as
//! [`MvcStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mvcount::checkpoint::{read_checkpoint, write_checkpoint, Precision};
use mvcount::dataset::{load_dataset, Dataset};
use mvcount::grad::{gradcheck, GradcheckConfig};
use mvcount::model::Model;
use mvcount::synth::{generate_dataset, SynthConfig};
use mvcount::trainer::{evaluate, predict_scene_count, render_scene_view, train, TrainConfig};
use mvcount::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    CheckFailed = 7,
    Panic = 8,
}

/// A dataset loaded into memory.
pub struct MvcDataset {
    inner: Dataset,
}

/// A trained or loaded model plus its rendered-density scale.
pub struct MvcModel {
    model: Model,
    rendered_density_scale: Option<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MvcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => MvcStatus::Io,
            Error::Format { .. } => MvcStatus::Format,
            Error::NonFiniteLoss { .. } => MvcStatus::NonFinite,
            _ => MvcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MvcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(MvcStatus::InvalidArgument, message.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvcStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {message}"));
            MvcStatus::Panic
        }
    }
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

/// Parses an optional JSON config; null or empty means defaults.
unsafe fn json_arg<T: serde::de::DeserializeOwned + Default>(p: *const c_char) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("config is not valid UTF-8"))?;
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(s).map_err(|e| invalid(format!("bad config: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mvc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic dataset under `out_dir`. `config_json` is a
/// synth config object or null for defaults.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mvc_generate_dataset(
    config_json: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> MvcStatus {
    guard(|| {
        let cfg: SynthConfig = json_arg(config_json)?;
        let out = path_arg(out_dir, "out_dir")?;
        generate_dataset(&cfg, seed, &out)?;
        Ok(())
    })
}

/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_dataset_load(dir: *const c_char, out: *mut *mut MvcDataset) -> MvcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let inner = load_dataset(&dir)?;
        *out = Box::into_raw(Box::new(MvcDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from [`mvc_dataset_load`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn mvc_dataset_free(dataset: *mut MvcDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_dataset_scene_count(dataset: *const MvcDataset, out: *mut usize) -> MvcStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        *out_arg(out, "out")? = d.inner.scenes.len();
        Ok(())
    })
}

/// Ground-truth person count of scene `index`.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_dataset_gt_count(
    dataset: *const MvcDataset,
    index: usize,
    out: *mut usize,
) -> MvcStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let scene = d
            .inner
            .scenes
            .get(index)
            .ok_or_else(|| invalid(format!("scene index {index} out of range")))?;
        *out_arg(out, "out")? = scene.count;
        Ok(())
    })
}

/// Trains on every scene of `dataset`. `config_json` is a training config
/// object or null for defaults.
///
/// # Safety
/// `dataset` must be a live handle, `config_json` null or a valid string,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_train(
    dataset: *const MvcDataset,
    config_json: *const c_char,
    out: *mut *mut MvcModel,
) -> MvcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let d = handle(dataset, "dataset")?;
        let cfg: TrainConfig = json_arg(config_json)?;
        let outcome = train(&cfg, &d.inner.scenes, &mut |_| {})?;
        *out = Box::into_raw(Box::new(MvcModel {
            model: outcome.model,
            rendered_density_scale: Some(outcome.rendered_density_scale),
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_model_load(path: *const c_char, out: *mut *mut MvcModel) -> MvcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ckpt = read_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(MvcModel {
            model: ckpt.model,
            rendered_density_scale: ckpt.rendered_density_scale,
        }));
        Ok(())
    })
}

/// Writes the model as a manifest at `path` plus a float32 blob beside it.
///
/// # Safety
/// `model` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mvc_model_save(model: *const MvcModel, path: *const c_char) -> MvcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = path_arg(path, "path")?;
        write_checkpoint(&path, &m.model, Precision::F32, m.rendered_density_scale)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvc_model_free(model: *mut MvcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_model_parameter_count(model: *const MvcModel, out: *mut usize) -> MvcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_arg(out, "out")? = m.model.parameter_count();
        Ok(())
    })
}

/// Predicted person count of scene `index`.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvc_predict_count(
    model: *const MvcModel,
    dataset: *const MvcDataset,
    index: usize,
    out: *mut f64,
) -> MvcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(dataset, "dataset")?;
        let scene = d
            .inner
            .scenes
            .get(index)
            .ok_or_else(|| invalid(format!("scene index {index} out of range")))?;
        *out_arg(out, "out")? = predict_scene_count(&m.model, scene)?;
        Ok(())
    })
}

/// Scene-level MAE and NAE over every scene of `dataset`.
///
/// # Safety
/// Handles must be live and the outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mvc_evaluate(
    model: *const MvcModel,
    dataset: *const MvcDataset,
    mae: *mut f64,
    nae: *mut f64,
) -> MvcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(dataset, "dataset")?;
        let mae = out_arg(mae, "mae")?;
        let nae = out_arg(nae, "nae")?;
        let report = evaluate(&m.model, &d.inner.scenes)?;
        *mae = report.mae;
        *nae = report.nae;
        Ok(())
    })
}

/// Renders view `view` of scene `index`. `rgb` receives `3·w·h` floats
/// (interleaved, row-major), `depth` and `density` `w·h` each; pass the
/// buffer length in floats as `*_len`. Any of the three may be null to skip
/// it. `width` and `height` are always written.
///
/// # Safety
/// Handles must be live; non-null buffers must hold at least `*_len` floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mvc_render_view(
    model: *const MvcModel,
    dataset: *const MvcDataset,
    index: usize,
    view: usize,
    samples: usize,
    seed: u64,
    rgb: *mut f32,
    rgb_len: usize,
    depth: *mut f32,
    depth_len: usize,
    density: *mut f32,
    density_len: usize,
    width: *mut usize,
    height: *mut usize,
) -> MvcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(dataset, "dataset")?;
        let width = out_arg(width, "width")?;
        let height = out_arg(height, "height")?;
        let scene = d
            .inner
            .scenes
            .get(index)
            .ok_or_else(|| invalid(format!("scene index {index} out of range")))?;
        let camera = scene
            .cameras
            .get(view)
            .ok_or_else(|| invalid(format!("view index {view} out of range")))?;
        *width = camera.width;
        *height = camera.height;
        let n = camera.width * camera.height;
        for (buf, len, need, what) in [
            (rgb, rgb_len, 3 * n, "rgb"),
            (depth, depth_len, n, "depth"),
            (density, density_len, n, "density"),
        ] {
            if !buf.is_null() && len < need {
                return Err(Failure(
                    MvcStatus::BufferTooSmall,
                    format!("{what} buffer holds {len} floats, need {need}"),
                ));
            }
        }
        if samples < 2 {
            return Err(invalid("samples must be >= 2"));
        }
        let r = render_scene_view(&m.model, scene, view, samples, seed)?;
        let k = m.rendered_density_scale.unwrap_or(1.0);
        let copy = |dst: *mut f32, src: &[f64], scale: f64| {
            if !dst.is_null() {
                let out = std::slice::from_raw_parts_mut(dst, src.len());
                for (o, v) in out.iter_mut().zip(src) {
                    *o = (scale * v) as f32;
                }
            }
        };
        copy(rgb, &r.rgb.data, 1.0);
        copy(depth, &r.depth.data, 1.0);
        copy(density, &r.density.data, k);
        Ok(())
    })
}

/// Runs the gradient check. `config_json` is a gradcheck config or null.
/// Returns [`MvcStatus::CheckFailed`] when the tolerance is exceeded; the
/// outputs are written either way.
///
/// # Safety
/// `config_json` must be null or a valid string; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mvc_gradcheck(
    config_json: *const c_char,
    seed: u64,
    max_rel_err: *mut f64,
    pass: *mut bool,
) -> MvcStatus {
    guard(|| {
        let cfg: GradcheckConfig = json_arg(config_json)?;
        let max_rel_err = out_arg(max_rel_err, "max_rel_err")?;
        let pass = out_arg(pass, "pass")?;
        let report = gradcheck(&cfg, seed)?;
        *max_rel_err = report.max_rel_err;
        *pass = report.pass;
        if report.pass {
            Ok(())
        } else {
            Err(Failure(
                MvcStatus::CheckFailed,
                format!("max relative error {:.3e}", report.max_rel_err),
            ))
        }
    })
}
