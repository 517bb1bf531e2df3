use std::path::{Path, PathBuf};
use std::process::Command;

use bifair_cli::{GroupingKind, RunConfig};
use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn bifair(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bifair"))
        .args(args)
        .env("BIFAIR_LOG", "off")
        .output()
        .unwrap()
}

#[test]
fn bundled_configs_parse() {
    for name in ["tiny.toml", "bench.toml"] {
        let cfg = RunConfig::load(&config(name), &[]).unwrap();
        assert_eq!(cfg.grouping, GroupingKind::Genre, "{name}");
        assert_eq!(cfg.train.seed, cfg.seed, "{name}");
    }
}

#[test]
fn missing_config_is_a_json_config_error() {
    let out = bifair(&["train", "-c", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], 2);
    assert!(err["error"].as_str().unwrap().contains("cannot read"));
}

#[test]
fn eval_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = format!("out_dir=\"{}\"", dir.path().display());
    let cfg = config("tiny.toml");
    let out = bifair(&["eval", "-c", cfg.to_str().unwrap(), "--set", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], 1);
}

#[test]
fn unknown_override_key_is_rejected() {
    let cfg = config("tiny.toml");
    let out = bifair(&["train", "-c", cfg.to_str().unwrap(), "--set", "train.learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(2));
}
