use std::ffi::{CStr, CString};
use std::ptr;

use unlearn_ffi::*;

fn last_error() -> String {
    let p = unl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn matrix(values: &[f64], epochs: usize, layers: usize) -> *mut UnlSalMatrix {
    let mut h = ptr::null_mut();
    let s = unsafe { unl_sal_matrix_new(values.as_ptr(), epochs, layers, &mut h) };
    assert_eq!(s, UnlStatus::Ok);
    h
}

#[test]
fn ud_of_matrix_with_itself_is_one() {
    let clean = matrix(&[0.1, 0.9, 0.2, 0.8, 0.15, 0.7], 3, 2);
    let mut r = UnlUdReport::default();
    assert_eq!(unsafe { unl_unlearnable_distance(clean, clean, &mut r) }, UnlStatus::Ok);
    assert_eq!(r.ud, 1.0);
    assert_eq!(r.lp_clean, 1.0);

    let (mut e, mut l) = (0, 0);
    assert_eq!(unsafe { unl_sal_matrix_shape(clean, &mut e, &mut l) }, UnlStatus::Ok);
    assert_eq!((e, l), (3, 2));
    unsafe { unl_sal_matrix_free(clean) };
}

#[test]
fn poisoned_with_no_learnable_layers() {
    let clean = matrix(&[0.1, 0.9, 0.2, 0.8], 2, 2);
    let pois = matrix(&[0.1, 0.2, 0.1, 0.2], 2, 2);
    let mut r = UnlUdReport::default();
    assert_eq!(unsafe { unl_unlearnable_distance(pois, clean, &mut r) }, UnlStatus::Ok);
    assert_eq!(r.ud, 0.0);
    let flat = matrix(&[0.3, 0.3, 0.3, 0.3], 2, 2);
    assert_eq!(
        unsafe { unl_unlearnable_distance(pois, flat, &mut r) },
        UnlStatus::Undefined
    );
    assert!(!last_error().is_empty());
    unsafe {
        unl_sal_matrix_free(clean);
        unl_sal_matrix_free(pois);
        unl_sal_matrix_free(flat);
    }
}

#[test]
fn null_arguments_are_rejected() {
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { unl_sal_matrix_new(ptr::null(), 2, 2, &mut h) },
        UnlStatus::NullPointer
    );
    assert!(h.is_null());
    assert!(last_error().contains("values"));
    let mut r = UnlUdReport::default();
    assert_eq!(
        unsafe { unl_unlearnable_distance(ptr::null(), ptr::null(), &mut r) },
        UnlStatus::NullPointer
    );
    assert_eq!(
        unsafe { unl_sal_matrix_new([1.0].as_ptr(), 0, 1, &mut h) },
        UnlStatus::InvalidArgument
    );
    unsafe { unl_sal_matrix_free(ptr::null_mut()) };
    unsafe { unl_model_free(ptr::null_mut()) };
}

#[test]
fn kmeans_splits_two_groups() {
    let v = [0.1, 0.12, 0.9, 0.11, 0.95];
    let mut r = UnlTwoMeans::default();
    assert_eq!(unsafe { unl_kmeans2(v.as_ptr(), v.len(), &mut r) }, UnlStatus::Ok);
    assert_eq!(r.split, 3);
    assert!((r.c1 - 0.11).abs() < 1e-12);
    assert!((r.c2 - 0.925).abs() < 1e-12);
    assert!(!r.degenerate);
    assert_ne!(unsafe { unl_kmeans2(v.as_ptr(), 0, &mut r) }, UnlStatus::Ok);
}

#[test]
fn table_check_reports_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    std::fs::write(
        &good,
        "method,lp,ud,bold\nvanilla,2.0,,false\na,1.0,0.5,true\nb,3.0,1.5,false\n",
    )
    .unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "method,lp,ud,bold\nvanilla,2.0,,false\na,1.0,0.6,true\n").unwrap();
    for (p, want) in [(good, true), (bad, false)] {
        let c = CString::new(p.to_str().unwrap()).unwrap();
        let mut passed = !want;
        assert_eq!(unsafe { unl_table_check(c.as_ptr(), &mut passed) }, UnlStatus::Ok);
        assert_eq!(passed, want);
    }
    let missing = CString::new(dir.path().join("none.csv").to_str().unwrap()).unwrap();
    let mut passed = false;
    assert_eq!(unsafe { unl_table_check(missing.as_ptr(), &mut passed) }, UnlStatus::Io);
}

#[test]
fn run_then_probe_saved_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(
        r#"{"data":{"generator":{"n_samples":400}},"poison":{"methods":["ops"]},"train":{"epochs":3,"batch_size":8,"lr_decay":1.0,"milestones":[]},"sal":{"eval_subset":64},"landscape":{"enabled":false}}"#,
    )
    .unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut failures = usize::MAX;
    let s = unsafe { unl_run_experiment(cfg.as_ptr(), out.as_ptr(), &mut failures) };
    assert_eq!(s, UnlStatus::Ok, "{}", last_error());
    assert_eq!(failures, 0);

    let clean_dir = CString::new(dir.path().join("vanilla").to_str().unwrap()).unwrap();
    let ops_dir = CString::new(dir.path().join("ops").to_str().unwrap()).unwrap();
    let (mut c, mut p) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(
        unsafe { unl_sal_matrix_load(clean_dir.as_ptr(), &mut c) },
        UnlStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(unsafe { unl_sal_matrix_load(ops_dir.as_ptr(), &mut p) }, UnlStatus::Ok);
    let mut r = UnlUdReport::default();
    assert_eq!(unsafe { unl_unlearnable_distance(p, c, &mut r) }, UnlStatus::Ok);
    assert!(r.ud.is_finite() && r.ud >= 0.0);
    unsafe {
        unl_sal_matrix_free(c);
        unl_sal_matrix_free(p);
    }

    let ck = dir.path().join("vanilla/checkpoints/epoch_003.json");
    let ck = CString::new(ck.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { unl_model_load(ck.as_ptr(), &mut m) },
        UnlStatus::Ok,
        "{}",
        last_error()
    );
    let mut count = 0;
    assert_eq!(unsafe { unl_model_param_count(m, &mut count) }, UnlStatus::Ok);
    assert_eq!(count, 12 * 10 + 10);

    let n = 16;
    let x: Vec<f64> = (0..n * 12).map(|i| (i % 7) as f64 / 7.0).collect();
    let y: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let probe = UnlProbe {
        epsilon: 0.05,
        norm: UnlNorm::L2,
        ascent_iters: 10,
        seed: 1,
    };
    let mut sal = -1.0;
    let s = unsafe { unl_sal_layer(m, 0, x.as_ptr(), y.as_ptr(), n, 12, probe, &mut sal) };
    assert_eq!(s, UnlStatus::Ok, "{}", last_error());
    assert!(sal > 0.0);
    let s = unsafe { unl_sal_layer(m, 0, x.as_ptr(), y.as_ptr(), n, 11, probe, &mut sal) };
    assert_eq!(s, UnlStatus::Shape);
    let s = unsafe {
        unl_sal_layer(
            m,
            0,
            x.as_ptr(),
            y.as_ptr(),
            n,
            12,
            UnlProbe { epsilon: -1.0, ..probe },
            &mut sal,
        )
    };
    assert_ne!(s, UnlStatus::Ok);
    unsafe { unl_model_free(m) };
}

#[test]
fn bad_config_is_a_config_error() {
    let cfg = CString::new(r#"{"bogus": 1}"#).unwrap();
    let out = CString::new("/nonexistent/never").unwrap();
    let mut failures = 0;
    let s = unsafe { unl_run_experiment(cfg.as_ptr(), out.as_ptr(), &mut failures) };
    assert_eq!(s, UnlStatus::Config);
    assert!(last_error().contains("bogus"));
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(unl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
