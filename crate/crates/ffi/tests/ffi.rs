use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use edgecl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(edgecl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn generate_save_load_predict() {
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(edgecl_scene_new_desk(&mut scene), EdgeclStatus::Ok);
        let mut width = 0usize;
        assert_eq!(edgecl_scene_input_width(scene, 16, &mut width), EdgeclStatus::Ok);
        assert_eq!(width, 64);

        let mut ds = ptr::null_mut();
        assert_eq!(edgecl_dataset_generate(scene, 3, 4, 2, 11, &mut ds), EdgeclStatus::Ok);
        let mut n = 0usize;
        assert_eq!(edgecl_dataset_len(ds, &mut n), EdgeclStatus::Ok);
        assert_eq!(n, 8);
        let mut label = 99usize;
        assert_eq!(edgecl_dataset_label(ds, 5, &mut label), EdgeclStatus::Ok);
        assert_eq!(label, 2);

        let tmp = tempfile::tempdir().unwrap();
        let dpath = CString::new(tmp.path().join("d").to_str().unwrap()).unwrap();
        assert_eq!(edgecl_dataset_save(ds, dpath.as_ptr()), EdgeclStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(edgecl_dataset_load(dpath.as_ptr(), &mut back), EdgeclStatus::Ok);
        assert_eq!(edgecl_dataset_len(back, &mut n), EdgeclStatus::Ok);
        assert_eq!(n, 8);

        let mut model = ptr::null_mut();
        assert_eq!(edgecl_model_new(scene, 4, 5, &mut model), EdgeclStatus::Ok);
        let mut probs = [0.0f64; 4];
        assert_eq!(edgecl_model_predict(model, ds, 0, probs.as_mut_ptr(), 4), EdgeclStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mpath = CString::new(tmp.path().join("m").to_str().unwrap()).unwrap();
        assert_eq!(edgecl_model_save(model, mpath.as_ptr()), EdgeclStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(edgecl_model_load(mpath.as_ptr(), &mut loaded), EdgeclStatus::Ok);
        let (mut a, mut b) = (0usize, 0usize);
        edgecl_model_param_count(model, &mut a);
        edgecl_model_param_count(loaded, &mut b);
        assert_eq!(a, b);
        let mut again = [0.0f64; 4];
        assert_eq!(edgecl_model_predict(loaded, back, 0, again.as_mut_ptr(), 4), EdgeclStatus::Ok);
        // checkpoints store f32
        for (p, q) in probs.iter().zip(&again) {
            assert!((p - q).abs() < 1e-4);
        }

        edgecl_model_free(loaded);
        edgecl_model_free(model);
        edgecl_dataset_free(back);
        edgecl_dataset_free(ds);
        edgecl_scene_free(scene);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        assert_eq!(edgecl_scene_new_desk(ptr::null_mut()), EdgeclStatus::NullPointer);
        assert!(last_error().contains("null"));

        let bad = CString::new(r#"{"n_subcarriers": 0}"#).unwrap();
        let mut scene = ptr::null_mut();
        assert_eq!(edgecl_scene_from_json(bad.as_ptr(), &mut scene), EdgeclStatus::Config);
        assert!(scene.is_null());
        let unknown = CString::new("{not json").unwrap();
        assert_eq!(edgecl_scene_from_json(unknown.as_ptr(), &mut scene), EdgeclStatus::Config);

        let missing = CString::new("/nonexistent/edgecl/dir").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(edgecl_dataset_load(missing.as_ptr(), &mut ds), EdgeclStatus::Io);
        assert!(!last_error().is_empty());

        assert_eq!(edgecl_scene_new_desk(&mut scene), EdgeclStatus::Ok);
        assert!(last_error().is_empty());
        assert_eq!(edgecl_dataset_generate(scene, 1, 2, 1, 0, &mut ds), EdgeclStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(edgecl_model_new(scene, 2, 0, &mut model), EdgeclStatus::Ok);
        let mut small = [0.0f64; 1];
        assert_eq!(edgecl_model_predict(model, ds, 0, small.as_mut_ptr(), 1), EdgeclStatus::Shape);
        let mut label = 0usize;
        assert_eq!(edgecl_dataset_label(ds, 10, &mut label), EdgeclStatus::InvalidArgument);

        edgecl_model_free(model);
        edgecl_dataset_free(ds);
        edgecl_scene_free(scene);
        edgecl_scene_free(ptr::null_mut());
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(edgecl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_symbol_and_compiles() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/edgecl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "edgecl_version",
        "edgecl_last_error",
        "edgecl_scene_new_desk",
        "edgecl_scene_from_json",
        "edgecl_scene_free",
        "edgecl_dataset_generate",
        "edgecl_dataset_load",
        "edgecl_dataset_save",
        "edgecl_dataset_free",
        "edgecl_model_new",
        "edgecl_model_predict",
        "edgecl_model_free",
        "EDGECL_STATUS_NON_FINITE",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(cc) = Command::new("cc").arg("--version").output() else { return };
    if !cc.status.success() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"edgecl.h\"\nint main(void) { EdgeclScene *s = 0; return edgecl_scene_new_desk(&s) == EDGECL_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
