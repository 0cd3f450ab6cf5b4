//! End-to-end runs of the `varhom` binary.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_varhom"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// File name to SHA-256 of its contents, recursively.
fn digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let hash = Sha256::digest(std::fs::read(&path).unwrap());
                out.insert(rel, hash.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.conf");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn check_passes_on_the_constant_field() {
    let out = scratch("constant");
    let o = run(&["check", "--config", config("constant.conf").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.ends_with("result: PASS (0 failed)\n"));
    assert!(out.join("check.txt").exists());
}

#[test]
fn outputs_do_not_depend_on_jobs() {
    let cfg = config("checkerboard.conf");
    let a = scratch("jobs1");
    let b = scratch("jobs2");
    let c = scratch("jobs1_again");
    for (dir, jobs) in [(&a, "1"), (&b, "2"), (&c, "1")] {
        let o = run(&["mixing-probe", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--jobs", jobs]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (da, db, dc) = (digest(&a), digest(&b), digest(&c));
    assert!(da.contains_key("mixing_cb14.csv"));
    assert_eq!(da, db);
    assert_eq!(da, dc);
}

#[test]
fn seed_offset_changes_samples() {
    let cfg = config("checkerboard.conf");
    let a = scratch("offset0");
    let b = scratch("offset7");
    for (dir, k) in [(&a, "0"), (&b, "7")] {
        let o = run(&["mixing-probe", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed-offset", k]);
        assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
    }
    assert_ne!(digest(&a)["mixing_cb14.csv"], digest(&b)["mixing_cb14.csv"]);
}

#[test]
fn malformed_value_names_the_key() {
    let dir = scratch("malformed");
    let cfg = write_config(&dir, "command = check\n[ensemble]\nlambda = four\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ensemble.lambda"), "{err}");
    assert!(!dir.join("summary.txt").exists());
}

#[test]
fn unknown_key_is_rejected_with_its_line() {
    let dir = scratch("unknown");
    let cfg = write_config(&dir, "command = mixing-probe\n\n[mixing]\nsampels = 100\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mixing.sampels") && err.contains('4'), "{err}");
}

#[test]
fn missing_command_and_bad_flags_are_operational_errors() {
    let dir = scratch("nocommand");
    let cfg = write_config(&dir, "[ensemble]\nphases = 1, 4\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["frobnicate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["check"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["check", "--config", cfg.to_str().unwrap(), "--jobs", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failed_property_exits_with_two() {
    // a band of 1e-9 standard errors cannot hold
    let dir = scratch("fail");
    let cfg = write_config(&dir, "command = mixing-probe\n[mixing]\ndistances = 0, 2\nsamples = 200\nsigmas = 1e-9\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stdout));
    let summary = std::fs::read_to_string(dir.join("summary.txt")).unwrap();
    assert!(summary.contains("FAIL"));
}
