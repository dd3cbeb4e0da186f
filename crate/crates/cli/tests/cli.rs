use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mfglab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfglab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_lq(dir: &Path, extra: &str) -> PathBuf {
    let text = fs::read_to_string(configs().join("lq.toml"))
        .unwrap()
        .replace("cells = 201", "cells = 81")
        .replace("agents = [64, 256, 1024]", "agents = [16, 32]")
        .replace("replicas = 8", "replicas = 2");
    let path = dir.join("lq.toml");
    fs::write(&path, format!("{text}\n{extra}")).unwrap();
    path
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn classify_prints_the_regime() {
    let out = mfglab(&[
        "classify",
        "--config",
        configs().join("lq.toml").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["regime"], "non-local");
    assert_eq!(v["eta"], serde_json::json!([0.0, 0.0, 0.0]));
}

#[test]
fn missing_scaling_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.toml");
    fs::write(&path, "[grid]\ncells = 40\n").unwrap();
    let out = mfglab(&["classify", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scaling"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = mfglab(&[
        "solve-mfg",
        "--config",
        "/nonexistent/config.toml",
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn solve_mfg_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_lq(dir.path(), "");
    let out_dir = dir.path().join("run");
    let out = mfglab(&[
        "solve-mfg",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["result"]["converged"], true);
    assert!(manifest["rng"].as_str().unwrap().starts_with("ChaCha20"));
    assert!(out_dir.join("value.csv").exists());
}

#[test]
fn unwritable_output_exits_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_lq(dir.path(), "");
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let target = blocker.join("run");
    let out = mfglab(&[
        "solve-mfg",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_lq(dir.path(), "[solver]\nmax_iter = 1\ntol = 1e-14\n");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "self_gain = [",
        "cross_gain = [{ kind = \"constant\", value = 0.5 }]\nself_gain = [",
    );
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("run");
    let out = mfglab(&[
        "solve-mfg",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(
        read_json(&out_dir.join("manifest.json"))["result"]["converged"],
        false
    );
}

#[test]
fn converge_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_lq(dir.path(), "");
    let run = |name: &str, seed: &str| {
        let target = dir.path().join(name);
        let out = mfglab(&[
            "converge",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            target.to_str().unwrap(),
            "--seed",
            seed,
            "--quiet",
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        target
    };
    let (a, b, c) = (run("a", "42"), run("b", "42"), run("c", "43"));
    let csv = |p: &Path| fs::read(p.join("converge.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_ne!(csv(&a), csv(&c));
    assert_eq!(
        read_json(&a.join("manifest.json"))["config"]["run"]["seed"],
        42
    );
}

#[test]
fn simulate_micro_and_finmarket_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_lq(dir.path(), "");
    let target = dir.path().join("micro");
    let out = mfglab(&[
        "simulate-micro",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(target.join("N16/trajectory_r1.csv").exists());

    let target = dir.path().join("market");
    let market = configs().join("market.json");
    let out = mfglab(&[
        "finmarket",
        "--config",
        market.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let header = fs::read_to_string(target.join("market.csv")).unwrap();
    assert!(header.starts_with("t,S,mean_x,mean_y,clamp_count\n"));
    assert!(target.join("limit.csv").exists());
}
