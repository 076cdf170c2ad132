use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motionmag::io::write_ppm;
use motionmag::model::{save_checkpoint, Model, ModelConfig};
use motionmag::Tensor;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionmag")).args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn frame(h: usize, w: usize, v: f32) -> Tensor<f32> {
    Tensor::from_vec(&[h, w, 3], (0..h * w * 3).map(|i| (v + i as f32 * 0.01) % 1.0).collect()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    save_checkpoint(&Model::init(ModelConfig::reduced(), 1).unwrap(), &p.join("m.ckpt")).unwrap();
    write_ppm(&frame(8, 8, 0.1), p.join("a.ppm")).unwrap();
    write_ppm(&frame(8, 8, 0.3), p.join("b.ppm")).unwrap();
    write_ppm(&frame(7, 8, 0.3), p.join("odd.ppm")).unwrap();
    write_ppm(&frame(8, 10, 0.3), p.join("wide.ppm")).unwrap();
    dir
}

#[test]
fn magnify_errors_are_distinct() {
    let dir = setup();
    let d = dir.path();
    let base = ["magnify", "--ckpt", "m.ckpt", "--alpha", "3", "--out", "o.ppm", "--ref", "a.ppm", "--query"];

    let ok = run(&[&base[..], &["b.ppm"]].concat(), d);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(d.join("o.ppm").exists());

    let odd = run(&[&base[..], &["odd.ppm"]].concat(), d);
    let wide = run(&[&base[..], &["wide.ppm"]].concat(), d);
    assert_eq!(code(&odd), 1);
    assert_eq!(code(&wide), 1);
    assert_ne!(stderr(&odd), stderr(&wide));

    fs::write(d.join("bad.ckpt"), b"EMAGxxxx").unwrap();
    let bad = run(&["magnify", "--ckpt", "bad.ckpt", "--alpha", "3", "--out", "o.ppm", "--ref", "a.ppm", "--query", "b.ppm"], d);
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));
    let missing = run(&["magnify", "--ckpt", "none.ckpt", "--alpha", "3", "--out", "o.ppm", "--ref", "a.ppm", "--query", "b.ppm"], d);
    assert_eq!(code(&missing), 2);
    assert_ne!(stderr(&bad), stderr(&missing));

    fs::write(d.join("p3.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let p3 = run(&[&base[..], &["p3.ppm"]].concat(), d);
    assert_eq!(code(&p3), 2);
    assert!(stderr(&p3).contains("unsupported"), "{}", stderr(&p3));
}

#[test]
fn sequence_modes_write_one_frame_per_pair() {
    let dir = setup();
    let d = dir.path();
    fs::create_dir(d.join("seq")).unwrap();
    for (i, v) in [0.1f32, 0.2, 0.3].iter().enumerate() {
        write_ppm(&frame(8, 8, *v), d.join(format!("seq/{i:03}.ppm"))).unwrap();
    }
    for mode in ["static", "dynamic"] {
        let out = run(&["magnify", "--ckpt", "m.ckpt", "--alpha", "2", "--frames", "seq", "--mode", mode, "--out", mode], d);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(d.join(mode).join("00001.ppm").exists() && d.join(mode).join("00002.ppm").exists());
    }
    // Frame 1 uses frame 0 as reference in both modes; frame 2 differs.
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("static/00001.ppm"), read("dynamic/00001.ppm"));
    assert_ne!(read("static/00002.ppm"), read("dynamic/00002.ppm"));

    let trace = run(&["magnify", "--ckpt", "m.ckpt", "--alpha", "2", "--ref", "a.ppm", "--query", "b.ppm", "--out", "t.ppm", "--dump-trace", "trace"], d);
    assert_eq!(code(&trace), 0);
    assert_eq!(fs::read_dir(d.join("trace")).unwrap().count(), 11);
}

#[test]
fn eval_reports_and_checks_counts() {
    let dir = setup();
    let d = dir.path();
    write_ppm(&frame(16, 16, 0.2), d.join("big.ppm")).unwrap();
    let small = run(&["eval", "--pred", "a.ppm", "--gt", "a.ppm", "--report", "r.json"], d);
    assert_eq!(code(&small), 1, "frames below the SSIM window are rejected");
    let out = run(&["eval", "--pred", "big.ppm", "--gt", "big.ppm", "--report", "r.json"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["rmse"], 0.0);
    assert_eq!(report["aggregate"]["psnr"], 99.0);
    assert_eq!(report["pairs"].as_array().unwrap().len(), 1);

    for sub in ["p", "g"] {
        fs::create_dir(d.join(sub)).unwrap();
    }
    fs::copy(d.join("big.ppm"), d.join("p/0.ppm")).unwrap();
    fs::copy(d.join("big.ppm"), d.join("p/1.ppm")).unwrap();
    fs::copy(d.join("big.ppm"), d.join("g/0.ppm")).unwrap();
    let mismatch = run(&["eval", "--pred", "p", "--gt", "g", "--report", "r.json"], d);
    assert_eq!(code(&mismatch), 2);
}

#[test]
fn train_validates_config_and_saves_init_model() {
    let dir = setup();
    let d = dir.path();
    let gen = run(&["gen", "--out", "data", "--count", "2", "--size", "32", "--seed", "1"], d);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    fs::write(d.join("bad.cfg"), "iterations = 2\nwarp_speed = 9\n").unwrap();
    assert_eq!(code(&run(&["train", "--data", "data", "--config", "bad.cfg", "--out", "x.ckpt"], d)), 1);
    assert_eq!(code(&run(&["train", "--data", "data", "--topk", "99", "--out", "x.ckpt"], d)), 1);
    assert_eq!(code(&run(&["train", "--data", "missing", "--out", "x.ckpt"], d)), 2);

    let zero = run(&["train", "--data", "data", "--iters", "0", "--out", "init.ckpt"], d);
    assert_eq!(code(&zero), 0, "{}", stderr(&zero));
    let model = motionmag::model::load_checkpoint(&d.join("init.ckpt")).unwrap();
    assert_eq!(model.params, Model::<f32>::init(ModelConfig::default(), 0).unwrap().params);
    assert_eq!(fs::read_to_string(d.join("init.log")).unwrap(), "");
}
