//! Shared fixture: a synthetic dataset and a briefly trained checkpoint,
//! built once per test binary through the real executable.
#![allow(dead_code)] // each test binary uses a different subset

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dynfield::raster::RgbImage;
use tempfile::TempDir;

pub struct Fixture {
    _dir: TempDir,
    pub data: PathBuf,
    pub ckpt: PathBuf,
}

pub fn dynfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynfield"))
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = dynfield(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Cheap training flags so the fixture builds in seconds.
pub const FAST: [&str; 6] = ["--rays", "64", "--n-coarse", "8", "--n-fine", "8"];

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let ckpt = dir.path().join("c.dnrf");
        ok(&["synth", "--preset", "blob", "--out", s(&data)]);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt), "--iters", "60"];
        args.extend(FAST);
        ok(&args);
        Fixture { _dir: dir, data, ckpt }
    })
}

pub fn decode(bytes: &[u8]) -> RgbImage {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("x.png");
    std::fs::write(&p, bytes).unwrap();
    RgbImage::load_png(&p).unwrap()
}

pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs() as f64))
        .sum();
    sum / (3 * a.pixels.len()) as f64
}
