use std::ffi::{c_char, CStr, CString};
use std::ptr;

use corrobust::checkpoint::{save_checkpoint, CheckpointMeta};
use corrobust::corruptions::{corrupt, CorruptionSpec, Kind};
use corrobust::metrics::predictions;
use corrobust::model::{build_model, ModelSpec};
use corrobust::Tensor;
use corrobust_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        corrobust_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn saved_model(dir: &tempfile::TempDir) -> (CString, corrobust::model::ModelGraph) {
    let m = build_model(&ModelSpec::desk([3, 8, 8], 4), 3).unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        method: "standard".into(),
        seed: 3,
        epoch: 0,
    };
    save_checkpoint(&m, &meta, &path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), m)
}

#[test]
fn load_predict_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, m) = saved_model(&dir);
    let mut h: *mut CorrobustModel = ptr::null_mut();
    unsafe {
        assert_eq!(corrobust_model_load(path.as_ptr(), &mut h), CorrobustStatus::Ok);
        let mut shape = [0usize; 3];
        let mut classes = 0usize;
        assert_eq!(
            corrobust_model_info(h, shape.as_mut_ptr(), &mut classes),
            CorrobustStatus::Ok
        );
        assert_eq!((shape, classes), ([3, 8, 8], 4));

        let n = 5;
        let x: Vec<f32> = (0..n * 192).map(|i| (i % 17) as f32 / 17.0).collect();
        let mut labels = vec![0u32; n];
        assert_eq!(
            corrobust_model_predict(h, x.as_ptr(), n, labels.as_mut_ptr()),
            CorrobustStatus::Ok
        );
        let expect = predictions(&m, &Tensor::new(vec![n, 3, 8, 8], x.clone()).unwrap()).unwrap();
        assert_eq!(labels.iter().map(|&v| v as usize).collect::<Vec<_>>(), expect);

        let mut adv = vec![0f32; x.len()];
        assert_eq!(
            corrobust_fgm(h, x.as_ptr(), labels.as_ptr(), n, 0.5, adv.as_mut_ptr()),
            CorrobustStatus::Ok
        );
        assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..n {
            let d: f32 = (0..192)
                .map(|j| (adv[i * 192 + j] - x[i * 192 + j]).powi(2))
                .sum::<f32>()
                .sqrt();
            assert!(d <= 0.5 + 1e-5, "{d}");
        }

        let bad = vec![9u32; n];
        assert_eq!(
            corrobust_fgm(h, x.as_ptr(), bad.as_ptr(), n, 0.5, adv.as_mut_ptr()),
            CorrobustStatus::InvalidArgument
        );
        corrobust_model_free(h);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut CorrobustModel = ptr::null_mut();
    unsafe {
        assert_eq!(
            corrobust_model_load(c.as_ptr(), &mut h),
            CorrobustStatus::CheckpointError
        );
        assert!(h.is_null());
        assert!(last_error().contains("magic"), "{}", last_error());

        let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
        assert_eq!(corrobust_model_load(missing.as_ptr(), &mut h), CorrobustStatus::IoError);
        assert_eq!(corrobust_model_load(ptr::null(), &mut h), CorrobustStatus::NullPointer);
        let mut acc = 0.0;
        assert_eq!(
            corrobust_accuracy(ptr::null(), ptr::null(), &mut acc),
            CorrobustStatus::NullPointer
        );
        // freeing null is a no-op
        corrobust_model_free(ptr::null_mut());
        corrobust_dataset_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates_and_reports_length() {
    unsafe {
        let mut h: *mut CorrobustModel = ptr::null_mut();
        corrobust_model_load(ptr::null(), &mut h);
        let full = corrobust_last_error(ptr::null_mut(), 0);
        assert_eq!(full, "path is null".len());
        let mut buf = [0 as c_char; 5];
        corrobust_last_error(buf.as_mut_ptr(), buf.len());
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "path");
    }
}

#[test]
fn datasets_and_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(&dir);
    unsafe {
        let mut d: *mut CorrobustDataset = ptr::null_mut();
        assert_eq!(corrobust_dataset_synthetic(4, 8, 3, 1, &mut d), CorrobustStatus::Ok);
        assert_eq!(corrobust_dataset_len(d), 12);
        let mut h: *mut CorrobustModel = ptr::null_mut();
        assert_eq!(corrobust_model_load(path.as_ptr(), &mut h), CorrobustStatus::Ok);
        let (mut clean, mut corr) = (-1.0, -1.0);
        assert_eq!(corrobust_accuracy(h, d, &mut clean), CorrobustStatus::Ok);
        assert_eq!(corrobust_corruption_accuracy(h, d, 0, &mut corr), CorrobustStatus::Ok);
        assert!((0.0..=1.0).contains(&clean) && (0.0..=1.0).contains(&corr));

        let mut bad: *mut CorrobustDataset = ptr::null_mut();
        assert_eq!(
            corrobust_dataset_synthetic(1, 8, 3, 1, &mut bad),
            CorrobustStatus::InvalidArgument
        );
        corrobust_dataset_free(d);
        corrobust_model_free(h);
    }
}

#[test]
fn corrupt_image_matches_library() {
    let img: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 11) as f32 / 11.0).collect();
    let mut out = vec![0f32; img.len()];
    let kind = CString::new("defocus_blur").unwrap();
    unsafe {
        let s = corrobust_corrupt_image(kind.as_ptr(), 3, 7, 3, 8, 8, img.as_ptr(), out.as_mut_ptr());
        assert_eq!(s, CorrobustStatus::Ok);
    }
    let t = Tensor::new(vec![3, 8, 8], img.clone()).unwrap();
    let expect = corrupt(
        &t,
        &CorruptionSpec {
            kind: Kind::DefocusBlur,
            severity: 3,
            seed: 7,
        },
    )
    .unwrap();
    assert_eq!(out, expect.data());

    let unknown = CString::new("fog").unwrap();
    unsafe {
        let s = corrobust_corrupt_image(unknown.as_ptr(), 3, 7, 3, 8, 8, img.as_ptr(), out.as_mut_ptr());
        assert_ne!(s, CorrobustStatus::Ok);
        let s = corrobust_corrupt_image(kind.as_ptr(), 6, 7, 3, 8, 8, img.as_ptr(), out.as_mut_ptr());
        assert_eq!(s, CorrobustStatus::InvalidArgument);
    }
}

#[test]
fn ece_through_c_abi() {
    // two bins: {0.2 wrong, 0.4 right} in the lower, {0.9 right} in the upper
    let conf = [0.2, 0.4, 0.9];
    let ok = [0u8, 1, 1];
    let mut e = 0.0;
    unsafe {
        assert_eq!(
            corrobust_ece(conf.as_ptr(), ok.as_ptr(), 3, 2, &mut e),
            CorrobustStatus::Ok
        );
    }
    let expect = (2.0 / 3.0) * (0.5f64 - 0.3).abs() + (1.0 / 3.0) * (1.0f64 - 0.9).abs();
    assert!((e - expect).abs() < 1e-12, "{e} vs {expect}");
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(corrobust_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/corrobust.h")).unwrap();
    for f in [
        "corrobust_version",
        "corrobust_last_error",
        "corrobust_model_load",
        "corrobust_model_free",
        "corrobust_model_info",
        "corrobust_model_predict",
        "corrobust_fgm",
        "corrobust_dataset_synthetic",
        "corrobust_dataset_load_cifar10",
        "corrobust_dataset_len",
        "corrobust_dataset_free",
        "corrobust_accuracy",
        "corrobust_corruption_accuracy",
        "corrobust_corrupt_image",
        "corrobust_ece",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(h.contains("CORROBUST_STATUS_CHECKPOINT_ERROR = 4"));
    assert!(h.contains("typedef struct CorrobustModel CorrobustModel;"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/corrobust.h");
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("no C compiler on PATH; skipping"),
    }
}
