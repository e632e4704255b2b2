#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

/// Small model and data dimensions that train in well under a second.
pub const TOY_CONFIG: &str = r#"
seed = 7

[synth]
image_size = 32

[model.encoder]
dim = 32
depth = 1
heads = 2

[model.encoder.patch]
image_size = 32
patch = 8

[model.lm]
dim = 64
layers = 2
heads = 4
context = 512

[train]
steps = 3
effective_batch = 2
micro_batch = 1

[probe]
epochs = 5
"#;

pub fn spectra(args: &[&str], cwd: &Path) -> Output {
    spectra_stdin(args, cwd, "")
}

pub fn spectra_stdin(args: &[&str], cwd: &Path, stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_spectra"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SPECTRA_NUM_THREADS")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn spectra");
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

pub fn ok(args: &[&str], cwd: &Path) -> String {
    let o = spectra(args, cwd);
    assert!(
        o.status.success(),
        "spectra {args:?} failed ({:?}): {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// A workspace with the toy config, a 4×50 corpus, its instruction set and
/// an alignment checkpoint.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new(per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy.toml"), TOY_CONFIG).unwrap();
        let f = Self { dir };
        let pc = per_class.to_string();
        f.ok(&[
            "dataset",
            "synth",
            "--config",
            "toy.toml",
            "--classes",
            "4",
            "--per-class",
            &pc,
            "--out",
            "data",
        ]);
        f.ok(&[
            "dataset",
            "build",
            "--config",
            "toy.toml",
            "--dataset",
            "data",
            "--out",
            "inst",
        ]);
        f
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn join(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    pub fn ok(&self, args: &[&str]) -> String {
        ok(args, self.path())
    }

    pub fn run(&self, args: &[&str]) -> Output {
        spectra(args, self.path())
    }

    pub fn align(&self, out: &str) {
        self.ok(&[
            "train",
            "align",
            "--config",
            "toy.toml",
            "--instructions",
            "inst/instructions.jsonl",
            "--out",
            out,
        ]);
    }
}

pub fn sha256(path: &Path) -> String {
    spectra_core::data::manifest::sha256_file(path).unwrap()
}
