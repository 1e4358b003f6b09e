//! C ABI over the distillation engine.
//!
//! Handles are opaque pointers created by `*_load`/`*_builtin`/`ds_distill`
//! and released with the matching `*_free`. Every fallible call returns a
//! [`DsStatus`]; on failure `ds_last_error_message` describes the cause
//! for the calling thread. Panics never cross the boundary: they are caught
//! and reported as `DS_STATUS_PANIC`.
//!
//! Images are written as row-major interleaved RGB `double` triples, so a
//! `width x height` render needs `3 * width * height` elements.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use dualsds::app::{self, Profile, RunConfig};
use dualsds::camera::{CameraPose, Vec3};
use dualsds::checkpoint;
use dualsds::distill::{run, Scores};
use dualsds::field::{RadianceField, VolumeSource};
use dualsds::mesh;
use dualsds::render::{render, QuadratureConfig, Sampling};
use dualsds::scene::SyntheticScene;
use dualsds::scores::{GroundTruth, NovelViewOracle};
use dualsds::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullArgument = 1,
    /// Unreadable or invalid config, scene, checkpoint or argument.
    InvalidInput = 2,
    Runtime = 3,
    EmptyMesh = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// A ground-truth scene.
pub struct DsScene {
    gt: Arc<GroundTruth>,
}

/// An optimizable radiance field.
pub struct DsField {
    field: RadianceField,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DsStatus, message: impl Into<String>) -> DsStatus {
    set_error(message.into());
    status
}

fn status_of(e: &Error) -> DsStatus {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::Scene(_)
        | Error::Checkpoint(_)
        | Error::DegeneratePose(_) => DsStatus::InvalidInput,
        Error::EmptyMesh(_) => DsStatus::EmptyMesh,
        _ => DsStatus::Runtime,
    }
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), DsStatus>) -> DsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DsStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait IntoStatus<T> {
    fn status(self) -> Result<T, DsStatus>;
}

impl<T> IntoStatus<T> for dualsds::Result<T> {
    fn status(self) -> Result<T, DsStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, DsStatus> {
    if p.is_null() {
        return Err(fail(DsStatus::NullArgument, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DsStatus::InvalidInput, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), DsStatus> {
    if p.is_null() {
        Err(fail(DsStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a scene file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_scene_load(path: *const c_char, out: *mut *mut DsScene) -> DsStatus {
    guard(|| {
        non_null(out, "out")?;
        let scene = SyntheticScene::load(&path_arg(path, "path")?).status()?;
        *out = Box::into_raw(Box::new(DsScene {
            gt: Arc::new(GroundTruth::new(scene)),
        }));
        Ok(())
    })
}

/// One of the built-in scenes: `sphere`, `two_box` or `shell`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_scene_builtin(name: *const c_char, out: *mut *mut DsScene) -> DsStatus {
    guard(|| {
        non_null(out, "out")?;
        let name = path_arg(name, "name")?;
        let name = name.to_string_lossy();
        let scene = SyntheticScene::builtin(&name)
            .ok_or_else(|| fail(DsStatus::InvalidInput, format!("no built-in scene {name:?}")))?;
        *out = Box::into_raw(Box::new(DsScene {
            gt: Arc::new(GroundTruth::new(scene)),
        }));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ds_scene_free(scene: *mut DsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Loads a field checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_field_load(path: *const c_char, out: *mut *mut DsField) -> DsStatus {
    guard(|| {
        non_null(out, "out")?;
        let field = checkpoint::load(&path_arg(path, "path")?).status()?;
        *out = Box::into_raw(Box::new(DsField { field }));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_field_save(field: *const DsField, path: *const c_char) -> DsStatus {
    guard(|| {
        non_null(field, "field")?;
        checkpoint::save(&(*field).field, &path_arg(path, "path")?).status()
    })
}

/// # Safety
/// `field` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ds_field_free(field: *mut DsField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Density and color at `point` seen along `direction` (normalized here).
///
/// # Safety
/// `point`, `direction` and `rgb` must each point to three doubles and
/// `sigma` to one.
#[no_mangle]
pub unsafe extern "C" fn ds_field_query(
    field: *const DsField,
    point: *const f64,
    direction: *const f64,
    sigma: *mut f64,
    rgb: *mut f64,
) -> DsStatus {
    guard(|| {
        non_null(field, "field")?;
        non_null(point, "point")?;
        non_null(direction, "direction")?;
        non_null(sigma, "sigma")?;
        non_null(rgb, "rgb")?;
        let p = Vec3::from_column_slice(std::slice::from_raw_parts(point, 3));
        let d = Vec3::from_column_slice(std::slice::from_raw_parts(direction, 3));
        if !(d.norm() > 0.0) {
            return Err(fail(DsStatus::InvalidInput, "direction has zero length"));
        }
        let (s, c) = (*field).field.query(&p, &d.normalize());
        *sigma = s;
        std::slice::from_raw_parts_mut(rgb, 3).copy_from_slice(&c);
        Ok(())
    })
}

/// Camera on the orbit at the given angles (degrees) looking at the origin.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsOrbit {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    pub samples: u32,
}

unsafe fn render_into<S: VolumeSource + ?Sized>(
    source: &S,
    orbit: &DsOrbit,
    out: *mut f64,
    len: usize,
) -> Result<(), DsStatus> {
    non_null(out, "out")?;
    let (w, h) = (orbit.width as usize, orbit.height as usize);
    if len < 3 * w * h {
        return Err(fail(
            DsStatus::BufferTooSmall,
            format!("buffer holds {len} doubles, need {}", 3 * w * h),
        ));
    }
    let pose = CameraPose::orbit(orbit.azimuth_deg, orbit.elevation_deg, orbit.distance, orbit.fov_deg, w, h)
        .status()?;
    let quad = QuadratureConfig {
        samples: orbit.samples as usize,
        bounding_radius: 3f64.sqrt(),
        ..QuadratureConfig::default()
    };
    let view = render(source, &pose, &quad, Sampling::Midpoint, false).status()?;
    std::slice::from_raw_parts_mut(out, 3 * w * h).copy_from_slice(&view.rgb.data);
    Ok(())
}

/// Renders a field into `out` (`len` doubles).
///
/// # Safety
/// `field` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_field_render(
    field: *const DsField,
    orbit: DsOrbit,
    out: *mut f64,
    len: usize,
) -> DsStatus {
    guard(|| {
        non_null(field, "field")?;
        render_into(&(*field).field, &orbit, out, len)
    })
}

/// Renders a scene's ground truth into `out` (`len` doubles).
///
/// # Safety
/// `scene` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_scene_render(
    scene: *const DsScene,
    orbit: DsOrbit,
    out: *mut f64,
    len: usize,
) -> DsStatus {
    guard(|| {
        non_null(scene, "scene")?;
        render_into((*scene).gt.scene(), &orbit, out, len)
    })
}

/// Distills a field from `scene` with the ground-truth oracles. `config`
/// is a run config path, or NULL for the smoke profile. `seed` replaces the
/// config's seed.
///
/// # Safety
/// `scene` must be a live handle, `config` NULL or a NUL-terminated string,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_distill(
    scene: *const DsScene,
    config: *const c_char,
    seed: u64,
    out: *mut *mut DsField,
) -> DsStatus {
    guard(|| {
        non_null(scene, "scene")?;
        non_null(out, "out")?;
        let mut cfg = if config.is_null() {
            RunConfig::for_profile(Profile::Smoke)
        } else {
            RunConfig::load(&path_arg(config, "config")?).status()?
        };
        cfg.distill.seed = seed;
        let gt = &(*scene).gt;
        let text = cfg.text_oracle(gt.clone());
        let image = NovelViewOracle::new(gt.clone());
        let field = run(
            &cfg.distill,
            &Scores {
                text: text.as_ref(),
                image: &image,
            },
            0,
            &mut [],
        )
        .status()?;
        *out = Box::into_raw(Box::new(DsField { field }));
        Ok(())
    })
}

/// Extracts, normalizes and writes the field's mesh as OBJ to `path`, with
/// its front view as PNG next to it. Returns `DS_STATUS_EMPTY_MESH` when no
/// density crosses `threshold`.
///
/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_field_mesh_obj(
    field: *const DsField,
    resolution: u32,
    threshold: f64,
    path: *const c_char,
) -> DsStatus {
    guard(|| {
        non_null(field, "field")?;
        let config = app::MeshConfig {
            threshold,
            resolution: resolution as usize,
            ..app::MeshConfig::default()
        };
        app::export_mesh(&(*field).field, &config, &path_arg(path, "path")?).status()?;
        Ok(())
    })
}

/// Field of view in degrees of the fixed front-view camera.
#[no_mangle]
pub extern "C" fn ds_front_view_fov_deg() -> f64 {
    dualsds::camera::fov_from_ndc_focal(mesh::FRONT_FOCAL)
}
