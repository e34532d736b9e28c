use std::ffi::{CStr, CString};
use std::ptr;
use tta_iqa_ffi::*;

fn last_error() -> String {
    let p = tta_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn build(seed: u64) -> *mut TtaModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { tta_model_build(seed, &mut m) }, TtaStatus::Ok);
    assert!(!m.is_null());
    m
}

fn batch(n: usize, c: usize, side: usize) -> Vec<f64> {
    (0..n * c * side * side)
        .map(|i| {
            let img = i / (c * side * side);
            let px = i % (side * side);
            let v = ((px % side) as f64 / side as f64 + (px / side) as f64 * 0.01 * img as f64).fract();
            0.2 + 0.6 * v
        })
        .collect()
}

#[test]
fn predict_matches_library() {
    let m = build(1);
    let crop = unsafe { tta_model_crop(m) };
    assert!(crop > 0);
    let px = batch(4, 3, crop);
    let mut out = vec![0.0; 4];
    let st = unsafe { tta_model_predict(m, px.as_ptr(), 4, 3, crop, crop, 0, out.as_mut_ptr()) };
    assert_eq!(st, TtaStatus::Ok);

    let lib = tta_iqa::QualityModel::build(tta_iqa::ArchConfig { seed: 1, ..Default::default() }).unwrap();
    let per = 3 * crop * crop;
    let imgs: Vec<_> = px.chunks(per).map(|d| tta_iqa::Image::new(crop, crop, 3, d.to_vec()).unwrap()).collect();
    let want = lib.predict_quality(&imgs, tta_iqa::BnMode::Eval).unwrap();
    assert_eq!(out, want);
    unsafe { tta_model_free(m) };
}

#[test]
fn adapt_predict_leaves_handle_untouched() {
    let m = build(2);
    let crop = unsafe { tta_model_crop(m) };
    let px = batch(4, 3, crop);
    let mut before = vec![0.0; 4];
    let mut after = vec![0.0; 4];
    let mut adapted = vec![0.0; 4];
    let mut flagged = 9u8;
    let mut p = tta_params_default();
    p.iterations = 1;
    unsafe {
        assert_eq!(tta_model_predict(m, px.as_ptr(), 4, 3, crop, crop, 0, before.as_mut_ptr()), TtaStatus::Ok);
        let st = tta_model_adapt_predict(m, px.as_ptr(), 4, 3, crop, crop, &p, adapted.as_mut_ptr(), &mut flagged);
        assert_eq!(st, TtaStatus::Ok, "{}", last_error());
        assert_eq!(tta_model_predict(m, px.as_ptr(), 4, 3, crop, crop, 0, after.as_mut_ptr()), TtaStatus::Ok);
        tta_model_free(m);
    }
    assert_eq!(before, after);
    assert!(flagged <= 1);
    assert!(adapted.iter().all(|v| v.is_finite()));
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = build(3);
    let crop = unsafe { tta_model_crop(m) };
    let px = batch(2, 3, crop);
    let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(tta_model_save(m, path.as_ptr()), TtaStatus::Ok);
        assert_eq!(tta_model_load(path.as_ptr(), &mut loaded), TtaStatus::Ok);
        tta_model_predict(m, px.as_ptr(), 2, 3, crop, crop, 0, a.as_mut_ptr());
        tta_model_predict(loaded, px.as_ptr(), 2, 3, crop, crop, 0, b.as_mut_ptr());
        tta_model_free(m);
        tta_model_free(loaded);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/x.ckpt").unwrap();
    assert_eq!(unsafe { tta_model_load(missing.as_ptr(), &mut m) }, TtaStatus::Io);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { tta_model_load(ptr::null(), &mut m) }, TtaStatus::NullPointer);
    assert!(last_error().contains("null"));

    let mut out = [0.0];
    let px = [0.5; 3];
    let st = unsafe { tta_model_predict(ptr::null(), px.as_ptr(), 1, 3, 1, 1, 0, out.as_mut_ptr()) };
    assert_eq!(st, TtaStatus::NullPointer);

    let mut p = tta_params_default();
    p.objective = 42;
    let h = build(0);
    let crop = unsafe { tta_model_crop(h) };
    let px = batch(4, 3, crop);
    let mut scores = [0.0; 4];
    let st = unsafe { tta_model_adapt_predict(h, px.as_ptr(), 4, 3, crop, crop, &p, scores.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, TtaStatus::InvalidArgument);
    assert!(last_error().contains("objective"));
    unsafe { tta_model_free(h) };
    unsafe { tta_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { tta_model_crop(ptr::null()) }, 0);
}

#[test]
fn metrics() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [10.0, 20.0, 25.0, 100.0];
    let mut r = 0.0;
    unsafe {
        assert_eq!(tta_srocc(a.as_ptr(), b.as_ptr(), 4, &mut r), TtaStatus::Ok);
        assert_eq!(r, 1.0);
        assert_eq!(tta_plcc(a.as_ptr(), a.as_ptr(), 4, &mut r), TtaStatus::Ok);
        assert_eq!(r, 1.0);
        let flat = [2.0; 4];
        assert_eq!(tta_srocc(a.as_ptr(), flat.as_ptr(), 4, &mut r), TtaStatus::Numeric);
        assert!(r.is_nan());
        assert_eq!(tta_srocc(a.as_ptr(), b.as_ptr(), 2, &mut r), TtaStatus::InvalidArgument);
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(tta_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tta_iqa.h")).unwrap();
    for f in [
        "tta_model_build",
        "tta_model_load",
        "tta_model_save",
        "tta_model_free",
        "tta_model_predict",
        "tta_model_adapt_predict",
        "tta_srocc",
        "tta_plcc",
        "tta_last_error_message",
        "tta_params_default",
        "typedef struct TtaModel TtaModel",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"tta_iqa.h\"\nint main(void) { TtaParams p = tta_params_default(); return p.iterations == 0 && TTA_STATUS_OK == 0; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "header failed to compile"),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
