use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfhom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfhom")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(mfhom(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = mfhom(&["validate", "--config", "/nonexistent/config.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn first_offending_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"particles": 10, "bogus": 1, "kappa": "two"}"#);
    let out = tmp.path().join("out");
    let o = mfhom(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bogus"), "{err}");
    assert!(!err.contains("kappa"), "{err}");
}

#[test]
fn ill_typed_value_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"kappa": "two"}"#);
    let out = tmp.path().join("out");
    let o = mfhom(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kappa"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(mfhom(&["validate", "--threads", "0", "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn validate_writes_versioned_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = mfhom(&["validate", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    for name in ["manifest.json", "report.json"] {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join(name)).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1, "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["subcommand"], "validate");
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f["path"] == "summary.csv"));
    assert!(out.join("summary.csv").is_file());
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"eps_list": [0.3, 0.2], "particles": 100, "reps": 2, "t_end": 0.1, "limit_particles": 100}"#,
    );
    let run = |threads: &str| {
        let out = tmp.path().join(format!("out{threads}"));
        let o = mfhom(&["simulate", "--config", &cfg, "--seed", "11", "--threads", threads, "--out", out.to_str().unwrap()]);
        assert!(matches!(o.status.code(), Some(0) | Some(1)));
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        manifest["files"].clone()
    };
    assert_eq!(run("1"), run("4"));
}
