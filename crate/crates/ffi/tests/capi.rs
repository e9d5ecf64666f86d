use std::ffi::{CStr, CString};
use std::ptr;

use mvcount_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mvc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

const SMALL_SYNTH: &str = r#"{"scenes": 2, "min_entities": 2, "max_entities": 3, "image_size": 16, "oracle_samples": 64, "volume_dims": [16, 16, 16]}"#;
const SMALL_TRAIN: &str = r#"{"steps": 3, "rays_per_view": 4, "samples": 8,
    "model": {"dims": [4, 4, 4], "channels": 2, "field": {"hidden_width": 8}}}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    dataset: *mut MvcDataset,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe { mvc_dataset_free(self.dataset) };
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let cfg = cstr(SMALL_SYNTH);
    let out = cstr(root.to_str().unwrap());
    assert_eq!(unsafe { mvc_generate_dataset(cfg.as_ptr(), 5, out.as_ptr()) }, MvcStatus::Ok);
    let mut dataset = ptr::null_mut();
    assert_eq!(unsafe { mvc_dataset_load(out.as_ptr(), &mut dataset) }, MvcStatus::Ok);
    assert!(!dataset.is_null());
    Fixture {
        _dir: dir,
        root,
        dataset,
    }
}

#[test]
fn version_is_a_semver_string() {
    let v = unsafe { CStr::from_ptr(mvc_version()) }.to_str().unwrap();
    assert_eq!(v.split('.').count(), 3);
}

#[test]
fn null_arguments_are_reported() {
    let mut n = 0usize;
    assert_eq!(unsafe { mvc_dataset_scene_count(ptr::null(), &mut n) }, MvcStatus::NullPointer);
    assert!(last_error().contains("dataset"));
    assert_eq!(unsafe { mvc_dataset_load(ptr::null(), ptr::null_mut()) }, MvcStatus::NullPointer);
    unsafe {
        mvc_dataset_free(ptr::null_mut());
        mvc_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_dataset_is_an_io_error_and_clears_the_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("nope").to_str().unwrap());
    let mut dataset = std::ptr::dangling_mut::<MvcDataset>();
    assert_eq!(unsafe { mvc_dataset_load(path.as_ptr(), &mut dataset) }, MvcStatus::Io);
    assert!(dataset.is_null());
    assert!(last_error().contains("nope"));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cstr(dir.path().to_str().unwrap());
    let cfg = cstr(r#"{"scenes": 1, "no_such_field": 3}"#);
    assert_eq!(
        unsafe { mvc_generate_dataset(cfg.as_ptr(), 0, out.as_ptr()) },
        MvcStatus::InvalidArgument
    );
    assert!(last_error().contains("no_such_field"));
}

#[test]
fn train_predict_render_and_round_trip() {
    let f = fixture();
    let mut n = 0usize;
    assert_eq!(unsafe { mvc_dataset_scene_count(f.dataset, &mut n) }, MvcStatus::Ok);
    assert_eq!(n, 2);
    let mut gt = 0usize;
    assert_eq!(unsafe { mvc_dataset_gt_count(f.dataset, 1, &mut gt) }, MvcStatus::Ok);
    assert!((2..=3).contains(&gt));
    assert_eq!(unsafe { mvc_dataset_gt_count(f.dataset, 2, &mut gt) }, MvcStatus::InvalidArgument);

    let cfg = cstr(SMALL_TRAIN);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mvc_train(f.dataset, cfg.as_ptr(), &mut model) }, MvcStatus::Ok, "{}", last_error());
    let mut params = 0usize;
    assert_eq!(unsafe { mvc_model_parameter_count(model, &mut params) }, MvcStatus::Ok);
    assert!(params > 0);

    let mut count = -1.0;
    assert_eq!(unsafe { mvc_predict_count(model, f.dataset, 0, &mut count) }, MvcStatus::Ok);
    assert!(count.is_finite() && count >= 0.0);
    let (mut mae, mut nae) = (-1.0, -1.0);
    assert_eq!(unsafe { mvc_evaluate(model, f.dataset, &mut mae, &mut nae) }, MvcStatus::Ok);
    assert!(mae >= 0.0 && nae >= 0.0);

    let (mut w, mut h) = (0usize, 0usize);
    let mut rgb = vec![0f32; 16 * 16 * 3];
    let mut depth = vec![0f32; 16 * 16];
    let status = unsafe {
        mvc_render_view(
            model, f.dataset, 0, 1, 8, 3,
            rgb.as_mut_ptr(), rgb.len(),
            depth.as_mut_ptr(), depth.len(),
            ptr::null_mut(), 0,
            &mut w, &mut h,
        )
    };
    assert_eq!(status, MvcStatus::Ok);
    assert_eq!((w, h), (16, 16));
    assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(depth.iter().any(|v| *v > 0.0));
    let status = unsafe {
        mvc_render_view(
            model, f.dataset, 0, 1, 8, 3,
            rgb.as_mut_ptr(), 10,
            ptr::null_mut(), 0,
            ptr::null_mut(), 0,
            &mut w, &mut h,
        )
    };
    assert_eq!(status, MvcStatus::BufferTooSmall);

    let ckpt = cstr(f.root.join("model.json").to_str().unwrap());
    assert_eq!(unsafe { mvc_model_save(model, ckpt.as_ptr()) }, MvcStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mvc_model_load(ckpt.as_ptr(), &mut loaded) }, MvcStatus::Ok);
    let mut again = -1.0;
    assert_eq!(unsafe { mvc_predict_count(loaded, f.dataset, 0, &mut again) }, MvcStatus::Ok);
    // Training rounds to f32 after every step, so the f32 blob is lossless.
    assert_eq!(again, count);
    unsafe {
        mvc_model_free(model);
        mvc_model_free(loaded);
    }
}

#[test]
fn gradcheck_passes_and_fails_on_demand() {
    let (mut err, mut pass) = (f64::NAN, false);
    let cfg = cstr(r#"{"dims": [4, 4, 4], "channels": 2, "hidden_width": 8}"#);
    assert_eq!(unsafe { mvc_gradcheck(cfg.as_ptr(), 0, &mut err, &mut pass) }, MvcStatus::Ok, "{}", last_error());
    assert!(pass && err <= 1e-4);
    let strict = cstr(r#"{"dims": [4, 4, 4], "channels": 2, "hidden_width": 8, "tolerance": 0.0}"#);
    assert_eq!(
        unsafe { mvc_gradcheck(strict.as_ptr(), 0, &mut err, &mut pass) },
        MvcStatus::CheckFailed
    );
    assert!(!pass);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mvcount.h")).unwrap();
    for name in [
        "mvc_last_error", "mvc_version", "mvc_generate_dataset", "mvc_dataset_load", "mvc_dataset_free",
        "mvc_dataset_scene_count", "mvc_dataset_gt_count", "mvc_train", "mvc_model_load", "mvc_model_save",
        "mvc_model_free", "mvc_model_parameter_count", "mvc_predict_count", "mvc_evaluate",
        "mvc_render_view", "mvc_gradcheck", "typedef struct MvcModel MvcModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mvcount.h"))
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
