use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn blend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blend"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn blend")
}

fn write_ppm(path: &Path, w: usize, h: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.extend(pixel(x, y));
        }
    }
    fs::write(path, bytes).unwrap();
}

/// Small source, mask and target in `dir`.
fn small_inputs(dir: &Path) {
    write_ppm(&dir.join("s.ppm"), 16, 16, |x, y| [200, (x * 12) as u8, (y * 12) as u8]);
    write_ppm(&dir.join("m.ppm"), 16, 16, |x, y| {
        let inside = (3..13).contains(&x) && (3..13).contains(&y);
        [if inside { 255 } else { 0 }; 3]
    });
    write_ppm(&dir.join("t.ppm"), 48, 48, |x, y| [(x * 5) as u8, 90, (y * 5) as u8]);
}

fn samples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples")
}

fn sha256(path: &Path) -> String {
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn poisson_smoke() {
    let dir = tempfile::tempdir().unwrap();
    small_inputs(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_blend"))
        .current_dir(dir.path())
        .args(["--engine", "poisson", "--source", "s.ppm", "--mask", "m.ppm", "--target", "t.ppm"])
        .args(["--offset", "16,16", "--out", "o.ppm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let written = fs::read(dir.path().join("o.ppm")).unwrap();
    assert!(written.starts_with(b"P6\n512 512\n255\n"));
    assert!(dir.path().join("o.manifest.json").exists());
    assert!(dir.path().join("o.poisson.csv").exists());
}

#[test]
fn missing_mask_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    small_inputs(dir.path());
    let p = |f: &str| dir.path().join(f).to_string_lossy().into_owned();
    let out = blend(&["--engine", "poisson", "--source", &p("s.ppm"), "--target", &p("t.ppm"), "--offset", "16,16", "--out", &p("o.ppm")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--mask"), "{}", stderr(&out));
    assert!(!dir.path().join("o.ppm").exists());
}

#[test]
fn unreadable_mask_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    small_inputs(dir.path());
    let p = |f: &str| dir.path().join(f).to_string_lossy().into_owned();
    let out = blend(&[
        "--engine", "poisson", "--source", &p("s.ppm"), "--mask", &p("absent.ppm"), "--target", &p("t.ppm"),
        "--offset", "16,16", "--out", &p("o.ppm"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--mask"), "{}", stderr(&out));
}

#[test]
fn malformed_lambda_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    small_inputs(dir.path());
    let p = |f: &str| dir.path().join(f).to_string_lossy().into_owned();
    let out = blend(&[
        "--network", "testnet:1", "--source", &p("s.ppm"), "--mask", &p("m.ppm"), "--target", &p("t.ppm"),
        "--offset", "16,16", "--out", &p("o.png"), "--lambda-tv", "lots",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--lambda-tv"), "{}", stderr(&out));
}

#[test]
fn overflowing_loss_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    small_inputs(dir.path());
    let p = |f: &str| dir.path().join(f).to_string_lossy().into_owned();
    let out = blend(&[
        "--engine", "stage1", "--network", "testnet:1", "--size", "32", "--iters1", "5",
        "--source", &p("s.ppm"), "--mask", &p("m.ppm"), "--target", &p("t.ppm"),
        "--offset", "8,8", "--out", &p("o.png"), "--lambda-tv", "1e308",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn two_stage_runs_are_byte_identical_and_replayable() {
    let s = samples();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut hashes = Vec::new();
    for dir in &dirs {
        let out_path = dir.path().join("blend.png");
        let out = blend(&[
            "--engine", "two-stage", "--network", "testnet:42", "--size", "64", "--seed", "42", "--offset", "32,40",
            "--source", s.join("source.ppm").to_str().unwrap(),
            "--mask", s.join("mask.ppm").to_str().unwrap(),
            "--target", s.join("target.ppm").to_str().unwrap(),
            "--out", out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        for f in ["blend.stage1.csv", "blend.stage2.csv", "blend.stage1.png", "blend.manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        hashes.push(sha256(&out_path));
    }
    assert_eq!(hashes[0], hashes[1]);

    let replay = dirs[0].path().join("replay.png");
    let manifest = dirs[0].path().join("blend.manifest.json");
    let out = blend(&["--from-manifest", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(sha256(&replay), hashes[0]);
}
