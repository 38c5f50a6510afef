use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
source = "synthetic"
train_images = 3
test_images = 2
size = 16

[model]
hidden_channels = 4
depth = 2
kernel = 3
embed_dim = 8
conditioned = true
activation = "silu"
skip_variance = 0.01

[train]
iterations = 5
batch_size = 2
crop = 16

[sampler]
num_steps = 4

[[guidance]]
kind = "visual"
rho = 0.5

[[guidance]]
kind = "data_fidelity"
rho = 0.5
"#;

fn gdsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdsr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn train(cfg: &str, out: &Path, extra: &[&str]) -> Vec<u8> {
    let out_s = out.to_string_lossy();
    let mut args = vec!["train", "--config", cfg, "--out", &out_s];
    args.extend_from_slice(extra);
    let o = gdsr(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read(out.join("checkpoint.json")).unwrap()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("seed = 3", "seed = 3\nbogus = true"));
    let o = gdsr(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn missing_config_and_bad_arguments_exit_with_two() {
    assert_eq!(gdsr(&["train", "--config", "/nonexistent/cfg.toml"]).status.code(), Some(2));
    assert_eq!(gdsr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gdsr(&[]).status.code(), Some(2));
}

#[test]
fn invalid_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("num_steps = 4", "num_steps = 0"));
    assert_eq!(gdsr(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = train(&cfg, &dir.path().join("a"), &[]);
    let b = train(&cfg, &dir.path().join("b"), &[]);
    let c = train(&cfg, &dir.path().join("c"), &["--seed", "4"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let loss = fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 6);
    assert!(dir.path().join("a/manifest.json").exists());
}

#[test]
fn sr_writes_images_metrics_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    train(&cfg, &out, &[]);
    let o = gdsr(&["sr", "--config", &cfg, "--out", out.to_str().unwrap(), "--trajectories"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("bicubic: psnr"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("image,method,seed,psnr,ssim,visual_loss"));
    assert_eq!(fs::read_dir(out.join("sr")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(out.join("trajectories")).unwrap().count(), 2);
}

#[test]
fn sr_without_weights_is_a_run_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = gdsr(&["sr", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes_and_reports_each_check() {
    let o = gdsr(&["verify"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 9);
    assert!(stdout.contains("0 failed"));
}
