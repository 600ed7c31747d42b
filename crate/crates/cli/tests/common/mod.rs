//! Helpers shared by the CLI test targets: spawn the real binary, capture
//! its streams, and lazily build one trained fixture checkpoint reused by
//! every read-only test.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

pub struct Run {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn assert_ok(&self) -> &Self {
        assert_eq!(
            self.status, 0,
            "expected success\nstdout:\n{}\nstderr:\n{}",
            self.stdout, self.stderr
        );
        self
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_robustkit")
}

pub fn robustkit(args: &[&str]) -> Run {
    robustkit_env(args, &[])
}

pub fn robustkit_env(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("ROBUSTKIT_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary spawns");
    Run {
        status: out.status.code().expect("no signal"),
        stdout: String::from_utf8(out.stdout).expect("utf8 stdout"),
        stderr: String::from_utf8(out.stderr).expect("utf8 stderr"),
    }
}

/// The standard small run config: two-gaussians data, a [2, 32, 2]
/// single-step-robust training setup, the full eval preset list, and all
/// three analysis sections. `out_dir` is intentionally absent — callers pass
/// `--out`.
pub fn base_config_text() -> &'static str {
    r#"seed = 7

[data]
kind = "two_gaussians"
n = 400
separation = 2.0
sigma = 0.6

[model]
layer_widths = [2, 32, 2]

[train]
epochs = 10
batch_size = 64
loss_mode = "qub_static"
lr = 0.1

[attack]
family = "fgsm_rs"
epsilon = 0.1

[eval]
epsilon = 0.1
attacks = ["fgsm", "pgd10", "pgd20", "pgd50-10"]

[analysis.landscape]
sample_index = 3
eps = 0.1
resolution = 50

[analysis.eigen]
n_samples = 100

[analysis.sparsity]
eps = [0.05, 0.1, 0.15, 0.2]
"#
}

pub fn write_base_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, base_config_text()).expect("config written");
    path
}

/// One trained checkpoint shared by all read-only tests in a target.
pub struct Fixture {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub train_dir: PathBuf,
}

pub fn trained_fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        // Leak the tempdir so the artifacts outlive every test.
        let dir = Box::leak(Box::new(tempfile::tempdir().expect("tempdir")));
        let config = write_base_config(dir.path());
        let train_dir = dir.path().join("train");
        robustkit(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_dir.to_str().unwrap(),
        ])
        .assert_ok();
        Fixture {
            config,
            checkpoint: train_dir.join("checkpoint.rkpt"),
            train_dir,
        }
    })
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

pub fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

pub fn parse_json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).expect("valid JSON")
}
