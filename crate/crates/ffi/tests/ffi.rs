use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use vino_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = vino_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(text: &str) -> *mut VinoConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { vino_config_parse(c(text).as_ptr(), &mut cfg) }, VinoStatus::Ok);
    cfg
}

#[test]
fn metrics_through_the_c_abi() {
    let mut v = 0.0;
    let a = VinoBox { x: 0.0, y: 0.0, w: 2.0, h: 2.0 };
    let b = VinoBox { x: 1.0, y: 1.0, w: 2.0, h: 2.0 };
    assert_eq!(unsafe { vino_iou(a, b, &mut v) }, VinoStatus::Ok);
    assert_eq!(v, 1.0 / 7.0);
    let ious = [0.6, 0.5, 0.4];
    assert_eq!(unsafe { vino_corloc(ious.as_ptr(), 3, &mut v) }, VinoStatus::Ok);
    assert!((v - 66.667).abs() < 1e-3);
    assert_eq!(unsafe { vino_corloc(ptr::null(), 0, &mut v) }, VinoStatus::Data);
    assert!(!last_error().is_empty());
}

#[test]
fn null_arguments_are_rejected() {
    assert_eq!(unsafe { vino_config_default(ptr::null_mut()) }, VinoStatus::InvalidArgument);
    assert!(last_error().contains("null"));
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { vino_config_parse(ptr::null(), &mut cfg) }, VinoStatus::InvalidArgument);
    assert!(cfg.is_null());
    unsafe { vino_config_free(ptr::null_mut()) };
    unsafe { vino_detector_free(ptr::null_mut()) };
}

#[test]
fn config_round_trip_and_errors() {
    let cfg = config("run.steps = 9\n");
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { vino_config_to_string(cfg, &mut s) }, VinoStatus::Ok);
    let text = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    assert!(text.contains("run.steps = 9"));
    unsafe {
        vino_string_free(s);
        vino_config_free(cfg);
    }
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { vino_config_parse(c("run.nope = 1").as_ptr(), &mut bad) }, VinoStatus::Config);
    assert!(bad.is_null());
    assert!(last_error().contains("nope"));
}

#[test]
fn generate_train_detect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = config("run.steps = 2\nsynth.num_frames = 40\nencoder.depth = 1\nencoder.embed_dim = 32\nencoder.num_heads = 2\n");
    let p = |p: &Path| c(p.to_str().unwrap());
    unsafe {
        assert_eq!(vino_synth_generate(cfg, p(&data).as_ptr()), VinoStatus::Ok);
        assert_eq!(vino_pretrain(cfg, p(&data).as_ptr(), p(&run).as_ptr()), VinoStatus::Ok);
        vino_config_free(cfg);
    }
    let mut det = ptr::null_mut();
    let ck = p(&run.join("checkpoint.bin"));
    assert_eq!(unsafe { vino_detector_load(ck.as_ptr(), 0, &mut det) }, VinoStatus::Ok);

    let (h, w) = (96, 96);
    let mut rgb = vec![0.2f32; h * w * 3];
    for r in 30..50 {
        for col in 40..60 {
            rgb[(r * w + col) * 3] = 0.9;
        }
    }
    let mut b = VinoBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 };
    assert_eq!(unsafe { vino_detector_detect(det, rgb.as_ptr(), h, w, &mut b) }, VinoStatus::Ok);
    assert!(b.w > 0.0 && b.h > 0.0 && b.x + b.w <= w as f64 && b.y + b.h <= h as f64);

    let (mut rows, mut cols) = (0, 0);
    let mut att = vec![0.0; 144];
    let st = unsafe { vino_detector_attention(det, rgb.as_ptr(), h, w, att.as_mut_ptr(), att.len(), &mut rows, &mut cols) };
    assert_eq!(st, VinoStatus::Ok);
    assert_eq!((rows, cols), (12, 12));
    assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let st = unsafe { vino_detector_attention(det, rgb.as_ptr(), h, w, att.as_mut_ptr(), 10, &mut rows, &mut cols) };
    assert_eq!(st, VinoStatus::InvalidArgument);

    let odd = vec![0.5f32; 30 * 30 * 3];
    assert_eq!(unsafe { vino_detector_detect(det, odd.as_ptr(), 30, 30, &mut b) }, VinoStatus::Data);
    assert!(last_error().contains("divisible"));
    unsafe { vino_detector_free(det) };

    let missing = p(&tmp.path().join("missing.bin"));
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { vino_detector_load(missing.as_ptr(), 0, &mut none) }, VinoStatus::Data);
    assert!(none.is_null());
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(vino_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"vino.h\"\nint main(void) {\n  VinoConfig *c = 0;\n  VinoStatus s = vino_config_default(&c);\n  \
         VinoBox a = {0, 0, 2, 2};\n  double v;\n  vino_iou(a, a, &v);\n  vino_config_free(c);\n  \
         return s == VINO_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
