#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY_MODEL: &str = r#"{"variant": "n", "use_ghost": true, "use_c3": true, "depth_multiple": 0.33, "width_multiple": 0.0625, "reg_max": 4}"#;

/// The binary with a clean worker environment.
pub fn darkship() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_darkship"));
    c.env_remove("DARKSHIP_WORKERS");
    c
}

pub fn run(args: &[&str]) -> Output {
    darkship().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    o
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A config file for the small test model, with extra top-level fields.
pub fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.json");
    let sep = if extra.is_empty() { "" } else { ", " };
    std::fs::write(&p, format!(r#"{{"model": {TINY_MODEL}{sep}{extra}}}"#)).unwrap();
    p
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub weights: PathBuf,
    pub scene: PathBuf,
    pub labels: PathBuf,
}

/// Tiny-model config, seeded weights and a synthetic scene of the given size.
pub fn fixture(width: usize, height: usize, targets: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let (weights, scene, labels) = (dir.path().join("w.bin"), dir.path().join("s.scene"), dir.path().join("l.csv"));
    ok(&["init-weights", "--config", s(&config), "--seed", "21", "--out", s(&weights)]);
    let (w, h, n) = (width.to_string(), height.to_string(), targets.to_string());
    ok(&[
        "synth", "--seed", "5", "--width", &w, "--height", &h, "--targets", &n, "--scene-out", s(&scene),
        "--labels-out", s(&labels),
    ]);
    Fixture {
        dir,
        config,
        weights,
        scene,
        labels,
    }
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// `detect` with extra flags; returns the CSV bytes and the stderr summary.
    pub fn detect(&self, extra: &[&str]) -> (Vec<u8>, String) {
        self.detect_with(&self.weights, extra)
    }

    pub fn detect_with(&self, weights: &Path, extra: &[&str]) -> (Vec<u8>, String) {
        let mut args = vec!["detect", "--scene", s(&self.scene), "--weights", s(weights), "--config", s(&self.config)];
        args.extend_from_slice(extra);
        let o = ok(&args);
        let summary = stderr(&o);
        (o.stdout, summary)
    }
}
