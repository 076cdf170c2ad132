use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use motionmag::io::{from_model_range, to_model_range};
use motionmag::model::{magnify_frames, save_checkpoint, ForwardOptions, Model, ModelConfig};
use motionmag::Tensor;
use motionmag_ffi::*;

const H: usize = 8;
const W: usize = 10;

fn frame(seed: u32) -> Vec<f32> {
    (0..H * W * 3).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 999.0).collect()
}

fn last_error() -> String {
    let p = mm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> *mut MmModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mm_model_load(c.as_ptr(), &mut m) }, MmStatus::Ok);
    assert!(mm_last_error().is_null());
    m
}

#[test]
fn magnify_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::init(ModelConfig::reduced(), 4).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let handle = load(&path);

    let mut cfg = MmModelConfig::default();
    assert_eq!(unsafe { mm_model_config(handle, &mut cfg) }, MmStatus::Ok);
    assert_eq!((cfg.channels, cfg.heads, cfg.topk, cfg.upscale), (12, 2, 2, 2));

    let (r, q) = (frame(1), frame(2));
    let mut out = vec![0f32; H * W * 3];
    let status = unsafe { mm_model_magnify(handle, r.as_ptr(), q.as_ptr(), H, W, 4.0, false, out.as_mut_ptr()) };
    assert_eq!(status, MmStatus::Ok);

    let t = |v: &Vec<f32>| to_model_range(&Tensor::from_vec(&[H, W, 3], v.clone()).unwrap());
    let want = from_model_range(&magnify_frames(&model, &t(&r), &t(&q), 4.0, ForwardOptions::default()).unwrap());
    assert_eq!(out, want.data());
    unsafe { mm_model_free(handle) };
}

#[test]
fn errors_are_reported_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let c = CString::new(bogus.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mm_model_load(c.as_ptr(), &mut m) }, MmStatus::Checkpoint);
    assert!(m.is_null());
    assert!(last_error().contains("magic"));

    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { mm_model_load(missing.as_ptr(), &mut m) }, MmStatus::Io);
    assert_eq!(unsafe { mm_model_load(ptr::null(), &mut m) }, MmStatus::NullPointer);

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Model::init(ModelConfig::reduced(), 0).unwrap(), &path).unwrap();
    let handle = load(&path);
    let f = frame(3);
    let mut out = vec![0f32; 9 * W * 3];
    let odd = unsafe { mm_model_magnify(handle, f.as_ptr(), f.as_ptr(), 9, W, 2.0, false, out.as_mut_ptr()) };
    assert_eq!(odd, MmStatus::InvalidArgument);
    assert!(last_error().contains("even"));
    let neg = unsafe { mm_model_magnify(handle, f.as_ptr(), f.as_ptr(), H, W, -1.0, false, out.as_mut_ptr()) };
    assert_eq!(neg, MmStatus::InvalidArgument);
    let nul = unsafe { mm_model_magnify(handle, ptr::null(), f.as_ptr(), H, W, 1.0, false, out.as_mut_ptr()) };
    assert_eq!(nul, MmStatus::NullPointer);
    unsafe {
        mm_model_free(handle);
        mm_model_free(ptr::null_mut());
    }
}

#[test]
fn metrics_of_identical_frames() {
    let big = |s| (0..16 * 16 * 3).map(|i| ((i * 37 + s) % 101) as f32 / 100.0).collect::<Vec<_>>();
    let a = big(0);
    let mut m = MmMetrics::default();
    assert_eq!(unsafe { mm_metrics(a.as_ptr(), a.as_ptr(), 16, 16, &mut m) }, MmStatus::Ok);
    assert_eq!(m.rmse, 0.0);
    assert_eq!(m.ssim, 1.0);
    let b = big(5);
    assert_eq!(unsafe { mm_metrics(a.as_ptr(), b.as_ptr(), 16, 16, &mut m) }, MmStatus::Ok);
    assert!(m.rmse > 0.0 && m.psnr < 99.0 && m.ssim < 1.0);
    // Below the SSIM window size.
    assert_ne!(unsafe { mm_metrics(a.as_ptr(), a.as_ptr(), 4, 4, &mut m) }, MmStatus::Ok);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/motionmag.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["mm_model_load", "mm_model_free", "mm_model_config", "mm_model_magnify", "mm_metrics", "mm_last_error", "MM_STATUS_CHECKPOINT"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"motionmag.h\"\nint main(void) {\n  MmModel *m = NULL;\n  MmStatus s = mm_model_load(\"x\", &m);\n  MmMetrics r;\n  float f[3] = {0};\n  s = mm_metrics(f, f, 1, 1, &r);\n  mm_model_free(m);\n  return s == MM_STATUS_OK;\n}\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler on PATH; header syntax not checked");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
