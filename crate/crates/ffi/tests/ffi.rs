use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use sconv_core::net::{Mode, NetworkConfig, SegModel};
use sconv_core::Tensor;
use sconv_ffi::*;

fn last_error() -> String {
    let need = unsafe { sconv_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; need];
    unsafe { sconv_last_error(buf.as_mut_ptr(), need) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn new_model(guided: bool) -> *mut SconvModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sconv_model_new_toy(6, 7, guided, &mut m) }, SconvStatus::Ok);
    assert!(!m.is_null());
    m
}

fn inputs(h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let img = (0..3 * h * w).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
    let sp = (0..h * w).map(|i| ((i * 13) % 29) as f32 / 29.0 - 0.5).collect();
    (img, sp)
}

#[test]
fn forward_matches_the_library() {
    let m = new_model(true);
    let (h, w) = (32, 32);
    let (img, sp) = inputs(h, w);
    let mut logits = vec![0f32; 6 * h * w];
    let st = unsafe {
        sconv_model_forward(m, img.as_ptr(), img.len(), sp.as_ptr(), sp.len(), 1, h, w, logits.as_mut_ptr(), logits.len())
    };
    assert_eq!(st, SconvStatus::Ok);

    let mut direct = SegModel::<f32>::new(NetworkConfig {
        seed: 7,
        ..NetworkConfig::toy(6)
    })
    .unwrap();
    let x = Tensor::from_vec(&[1, 3, h, w], img.clone()).unwrap();
    let s = Tensor::from_vec(&[1, 1, h, w], sp.clone()).unwrap();
    let want = direct.forward(&x, &s, Mode::Eval).unwrap().logits;
    assert_eq!(logits, want.data());

    let mut labels = vec![0u8; h * w];
    let st = unsafe {
        sconv_model_predict(m, img.as_ptr(), img.len(), sp.as_ptr(), sp.len(), h, w, labels.as_mut_ptr(), labels.len())
    };
    assert_eq!(st, SconvStatus::Ok);
    assert!(labels.iter().all(|&l| l < 6));
    unsafe { sconv_model_free(m) };
}

#[test]
fn introspection_reports_counts() {
    let g = new_model(true);
    let b = new_model(false);
    unsafe {
        assert_eq!(sconv_model_num_classes(g), 6);
        assert_eq!(sconv_model_spatial_channels(g), 1);
        assert_eq!(sconv_model_guided_convs(g), 12);
        assert_eq!(sconv_model_guided_convs(b), 0);
        let (mut cg, mut cb) = (SconvParamCounts::default(), SconvParamCounts::default());
        assert_eq!(sconv_model_param_counts(g, &mut cg), SconvStatus::Ok);
        assert_eq!(sconv_model_param_counts(b, &mut cb), SconvStatus::Ok);
        assert_eq!(cg.total, cb.total + cg.sconv_extra);
        assert_eq!(cb.sconv_extra, 0);
        assert_eq!(cg.total, cg.backbone + cg.sconv_extra + cg.decoder + cg.aux);
        assert_eq!(sconv_model_num_classes(ptr::null()), 0);
        sconv_model_free(g);
        sconv_model_free(b);
        sconv_model_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(sconv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn errors_map_to_status_codes_with_messages() {
    let m = new_model(true);
    let (img, sp) = inputs(32, 32);
    let mut logits = vec![0f32; 10];
    unsafe {
        let st = sconv_model_forward(m, img.as_ptr(), img.len(), sp.as_ptr(), sp.len(), 1, 32, 32, logits.as_mut_ptr(), 10);
        assert_eq!(st, SconvStatus::Dimension);
        assert!(last_error().contains("logits"), "{}", last_error());

        let st = sconv_model_forward(m, ptr::null(), 0, sp.as_ptr(), sp.len(), 1, 32, 32, logits.as_mut_ptr(), 10);
        assert_eq!(st, SconvStatus::NullPointer);
        assert!(last_error().contains("image"));

        // Extents that are not multiples of the output stride.
        let (img, sp) = inputs(24, 24);
        let mut out = vec![0f32; 6 * 24 * 24];
        let st = sconv_model_forward(m, img.as_ptr(), img.len(), sp.as_ptr(), sp.len(), 1, 24, 24, out.as_mut_ptr(), out.len());
        assert_ne!(st, SconvStatus::Ok);

        let mut h = ptr::null_mut();
        let missing = CString::new("/nonexistent/checkpoint").unwrap();
        assert_eq!(sconv_model_load(missing.as_ptr(), &mut h), SconvStatus::Io);
        assert!(h.is_null());
        assert_eq!(sconv_model_load(ptr::null(), &mut h), SconvStatus::NullPointer);
        assert_eq!(sconv_model_new_toy(0, 1, true, &mut h), SconvStatus::Config);
        assert_eq!(sconv_model_new_toy(6, 1, true, ptr::null_mut()), SconvStatus::NullPointer);

        // A short buffer still receives a terminated prefix.
        let mut tiny = [1 as c_char; 4];
        let need = sconv_last_error(tiny.as_mut_ptr(), tiny.len());
        assert!(need > 4);
        assert_eq!(tiny[3], 0);
        sconv_model_free(m);
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ck").to_str().unwrap()).unwrap();
    let m = new_model(true);
    let mut back = ptr::null_mut();
    let (img, sp) = inputs(16, 16);
    let (mut a, mut b) = (vec![0f32; 6 * 256], vec![0f32; 6 * 256]);
    unsafe {
        assert_eq!(sconv_model_save(m, path.as_ptr()), SconvStatus::Ok);
        assert_eq!(sconv_model_load(path.as_ptr(), &mut back), SconvStatus::Ok);
        for (h, out) in [(m, &mut a), (back, &mut b)] {
            let st = sconv_model_forward(h, img.as_ptr(), img.len(), sp.as_ptr(), sp.len(), 1, 16, 16, out.as_mut_ptr(), out.len());
            assert_eq!(st, SconvStatus::Ok);
        }
        sconv_model_free(m);
        sconv_model_free(back);
    }
    assert_eq!(a, b);
}

/// The generated header must be valid C and C++.
#[test]
fn header_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sconv.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["sconv_model_new_toy", "sconv_model_forward", "sconv_last_error", "SCONV_STATUS_DIMENSION"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, header])
            .output()
        else {
            eprintln!("{cc} not available; skipping syntax check");
            continue;
        };
        assert!(out.status.success(), "{cc}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
