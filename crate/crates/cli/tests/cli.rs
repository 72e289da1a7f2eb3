use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cift_core::quantizer::{quantize, QuantParams};
use cift_core::FeatureTensor;

fn cift(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cift")).args(args).current_dir(dir).output().expect("spawn cift")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ramp(h: usize, w: usize, c: usize) -> FeatureTensor {
    let data = (0..h * w * c).map(|i| ((i * 37) % 101) as f64 / 10.0 - 3.0).collect();
    FeatureTensor::new(h, w, c, data).unwrap()
}

#[test]
fn rate_loss_of_zero_tensor_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    FeatureTensor::zeros(4, 6, 3).save(dir.path().join("zero.ften")).unwrap();
    let out = cift(&["rate-loss", "zero.ften", "--grad", "g.ften"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "0");
    let g = FeatureTensor::load(dir.path().join("g.ften")).unwrap();
    assert_eq!((g.height(), g.width(), g.channels()), (4, 6, 3));
}

#[test]
fn encode_decode_round_trips_levels() {
    let dir = tempfile::tempdir().unwrap();
    let f = ramp(8, 8, 16);
    f.save(dir.path().join("f.ften")).unwrap();
    let enc = cift(&["encode", "f.ften", "--bits", "8", "--out", "f.cifb"], dir.path());
    assert_eq!(enc.status.code(), Some(0), "{}", String::from_utf8_lossy(&enc.stderr));
    let dec = cift(&["decode", "f.cifb", "--out", "g.ften"], dir.path());
    assert_eq!(dec.status.code(), Some(0), "{}", String::from_utf8_lossy(&dec.stderr));

    let q = QuantParams::fitted(8, &f).unwrap();
    let g = FeatureTensor::load(dir.path().join("g.ften")).unwrap();
    assert_eq!(quantize(&g, &q), quantize(&f, &q));
}

#[test]
fn quantize_writes_pgm_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    ramp(4, 4, 8).save(dir.path().join("f.ften")).unwrap();
    let out = cift(&["quantize", "f.ften", "--bits", "6", "--grid", "2x4", "--out", "f.pgm"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = fs::read_to_string(dir.path().join("f.q")).unwrap();
    let q: QuantParams = sidecar.trim().parse().unwrap();
    assert_eq!(q.bits(), 6);
    let pgm = fs::read(dir.path().join("f.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}

#[test]
fn bdrate_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "codec,quality,bpfe,metric_kind,metric\n\
               external,95,4.0,PSNR,30.0\n\
               external,90,3.0,PSNR,28.5\n\
               external,85,2.2,PSNR,27.0\n\
               external,80,1.6,PSNR,25.0\n";
    fs::write(dir.path().join("ref.csv"), csv).unwrap();
    fs::write(dir.path().join("test.csv"), csv).unwrap();
    let out = cift(&["bdrate", "ref.csv", "test.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "PSNR\t0.00%");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cift(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(cift(&["rate-loss", "x.ften", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(cift(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cift(&["rate-loss", "missing.ften"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
    fs::write(dir.path().join("junk.cifb"), b"not a container").unwrap();
    assert_eq!(cift(&["decode", "junk.cifb", "--out", "g.ften"], dir.path()).status.code(), Some(1));
    assert!(!dir.path().join("g.ften").exists());
}

#[test]
fn gen_data_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = cift(&["gen-data", "--seed", "3", "--count", "2", "--out", "data"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let img = FeatureTensor::load(dir.path().join("data/image_0001.ften")).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (64, 64, 3));
    assert!(dir.path().join("data/labels_0000.pgm").exists());
}

#[test]
fn train_and_evaluate_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "epochs = 1\ntrain_samples = 2\ntest_samples = 2\nbatch = 2\n";
    fs::write(dir.path().join("small.cfg"), cfg).unwrap();
    let t = cift(&["train", "--config", "small.cfg", "--seed", "4", "--out", "run"], dir.path());
    assert_eq!(t.status.code(), Some(0), "{}", String::from_utf8_lossy(&t.stderr));
    let log = fs::read_to_string(dir.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let e = cift(
        &["evaluate", "run/model.ckpt", "--config", "small.cfg", "--lossless-only", "--out", "rd.csv"],
        dir.path(),
    );
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    let rd = fs::read_to_string(dir.path().join("rd.csv")).unwrap();
    assert_eq!(rd.lines().count(), 1 + 3);
}
