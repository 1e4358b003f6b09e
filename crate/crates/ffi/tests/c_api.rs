use std::ffi::{CStr, CString};
use std::ptr;

use dualsds_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ds_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn orbit(w: u32, h: u32) -> DsOrbit {
    DsOrbit {
        azimuth_deg: 30.0,
        elevation_deg: 10.0,
        distance: 2.2,
        fov_deg: 40.0,
        width: w,
        height: h,
        samples: 64,
    }
}

#[test]
fn scene_render_and_errors() {
    let mut scene = ptr::null_mut();
    let name = cstr("sphere");
    assert_eq!(unsafe { ds_scene_builtin(name.as_ptr(), &mut scene) }, DsStatus::Ok);
    assert!(ds_last_error_message().is_null());

    let mut buf = vec![0.0; 3 * 8 * 8];
    let st = unsafe { ds_scene_render(scene, orbit(8, 8), buf.as_mut_ptr(), buf.len()) };
    assert_eq!(st, DsStatus::Ok);
    // Center pixel sees the red sphere, the corner the white background.
    let center = &buf[3 * (4 * 8 + 4)..3 * (4 * 8 + 4) + 3];
    assert!(center[0] > 0.9 && center[1] < 0.1);
    assert_eq!(&buf[..3], &[1.0, 1.0, 1.0]);

    let st = unsafe { ds_scene_render(scene, orbit(8, 8), buf.as_mut_ptr(), 10) };
    assert_eq!(st, DsStatus::BufferTooSmall);
    assert!(last_error().contains("need 192"));
    unsafe { ds_scene_free(scene) };

    let missing = cstr("/nonexistent/scene.toml");
    let mut s2 = ptr::null_mut();
    assert_eq!(unsafe { ds_scene_load(missing.as_ptr(), &mut s2) }, DsStatus::InvalidInput);
    assert!(last_error().contains("/nonexistent/scene.toml"));
    assert_eq!(unsafe { ds_scene_load(ptr::null(), &mut s2) }, DsStatus::NullArgument);
    let unknown = cstr("teapot");
    assert_eq!(unsafe { ds_scene_builtin(unknown.as_ptr(), &mut s2) }, DsStatus::InvalidInput);
    unsafe { ds_scene_free(ptr::null_mut()) };
}

#[test]
fn distill_save_load_query_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        "[distill]\ntotal_steps = 2\nresolution_start = 8\nresolution_end = 8\nsamples_per_ray = 16\n",
    )
    .unwrap();
    let mut scene = ptr::null_mut();
    let name = cstr("sphere");
    assert_eq!(unsafe { ds_scene_builtin(name.as_ptr(), &mut scene) }, DsStatus::Ok);
    let mut field = ptr::null_mut();
    let cfg = cstr(config_path.to_str().unwrap());
    assert_eq!(unsafe { ds_distill(scene, cfg.as_ptr(), 3, &mut field) }, DsStatus::Ok);

    let ckpt = cstr(dir.path().join("f.ckpt").to_str().unwrap());
    assert_eq!(unsafe { ds_field_save(field, ckpt.as_ptr()) }, DsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ds_field_load(ckpt.as_ptr(), &mut loaded) }, DsStatus::Ok);

    let p = [0.1, -0.2, 0.05];
    let d = [0.0, 2.0, 0.0];
    let (mut s, mut c) = (0.0, [0.0; 3]);
    let st = unsafe { ds_field_query(loaded, p.as_ptr(), d.as_ptr(), &mut s, c.as_mut_ptr()) };
    assert_eq!(st, DsStatus::Ok);
    assert!(s >= 0.0 && c.iter().all(|v| (0.0..=1.0).contains(v)));
    let zero = [0.0; 3];
    let st = unsafe { ds_field_query(loaded, p.as_ptr(), zero.as_ptr(), &mut s, c.as_mut_ptr()) };
    assert_eq!(st, DsStatus::InvalidInput);

    let mut buf = vec![0.0; 3 * 4 * 4];
    assert_eq!(
        unsafe { ds_field_render(loaded, orbit(4, 4), buf.as_mut_ptr(), buf.len()) },
        DsStatus::Ok
    );
    assert!(buf.iter().all(|v| v.is_finite()));

    // A fresh field is far below this density everywhere.
    let obj = cstr(dir.path().join("m.obj").to_str().unwrap());
    assert_eq!(
        unsafe { ds_field_mesh_obj(loaded, 16, 1e6, obj.as_ptr()) },
        DsStatus::EmptyMesh
    );
    assert_eq!(
        unsafe { ds_field_mesh_obj(loaded, 4, 1.0, obj.as_ptr()) },
        DsStatus::InvalidInput
    );

    unsafe {
        ds_field_free(field);
        ds_field_free(loaded);
        ds_scene_free(scene);
    }
}

#[test]
fn front_view_fov() {
    assert!((ds_front_view_fov_deg() - 36.8699).abs() < 1e-3);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dualsds.h")).unwrap();
    for name in [
        "typedef struct DsScene DsScene",
        "typedef struct DsField DsField",
        "DS_STATUS_EMPTY_MESH = 4",
        "ds_last_error_message",
        "ds_distill",
        "ds_field_mesh_obj",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
