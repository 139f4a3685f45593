//! End-to-end tests driving the compiled binary through every subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_condet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Deliberately tiny: stride-4 single level, 32px scenes, 6 SGD steps.
const TINY_CFG: &str = "\
anchors.strides = 4
anchors.base_sizes = 12
anchors.scales = 1.0
anchors.aspect_ratios = 0.5, 1.0, 2.0
model.backbone_channels = 4, 8
model.trunk_channels = 8
model.trunk_depth = 1
scene.image_side = 32
scene.min_size = 8
scene.max_size = 20
scene.max_objects = 2
data.train_count = 4
data.val_count = 2
data.test_count = 2
trainer.steps = 6
trainer.flip_augment = false
trainer.seed = 7
";

fn write_tiny_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY_CFG).unwrap();
    path
}

fn s(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = s(&write_tiny_cfg(dir.path()));

    let data = s(&dir.path().join("data"));
    let out = run(&["generate-data", "--config", &cfg, "--out", &data]);
    assert_ok(&out, "generate-data");
    for split in ["train", "val", "test"] {
        let d = dir.path().join("data").join(split);
        assert!(d.join("annotations.csv").is_file(), "{split} annotations");
        assert!(d.join("img_00000.pgm").is_file(), "{split} first image");
    }

    let ckpt = s(&dir.path().join("model.ckpt"));
    let out = run(&["train", "--config", &cfg, "--out", &ckpt]);
    assert_ok(&out, "train");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("trained 6 steps"), "{stdout}");
    assert!(dir.path().join("model.ckpt").is_file());
    let curve = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7, "header plus one row per step");
    assert!(curve.starts_with("step,total,"));

    // Same config and seed must reproduce the metrics byte for byte.
    let eval1 = s(&dir.path().join("eval1"));
    let eval2 = s(&dir.path().join("eval2"));
    for out_dir in [&eval1, &eval2] {
        let out = run(&["evaluate", "--config", &cfg, "--ckpt", &ckpt, "--split", "val", "--out", out_dir]);
        assert_ok(&out, "evaluate");
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.contains("AP50"), "{stdout}");
    }
    for name in ["metrics_val.csv", "detections_val.csv"] {
        let a = std::fs::read(dir.path().join("eval1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("eval2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let metrics = std::fs::read_to_string(dir.path().join("eval1").join("metrics_val.csv")).unwrap();
    let ap_line = metrics.lines().nth(1).unwrap();
    let ap: f64 = ap_line.strip_prefix("ap,").unwrap().parse().unwrap();
    assert!(ap.is_finite() && (0.0..=1.0).contains(&ap));

    let diag = dir.path().join("diag");
    let out = run(&["analyze", "--config", &cfg, "--ckpt", &ckpt, "--out", &s(&diag)]);
    assert_ok(&out, "analyze");
    for name in [
        "iou_shift_samples.csv",
        "iou_shift_scatter.svg",
        "iou_shift_bins.csv",
        "iou_shift_means.svg",
        "score_iou_samples.csv",
        "score_by_iou_bins.csv",
        "score_by_iou.svg",
    ] {
        assert!(diag.join(name).is_file(), "missing {name}");
    }
    let svg = std::fs::read_to_string(diag.join("iou_shift_scatter.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    // A baseline checkpoint has no second regression head; evaluate must
    // still load it by matching the model shape to the checkpoint.
    let base = s(&dir.path().join("base.ckpt"));
    let out = run(&["train", "--config", &cfg, "--out", &base, "--baseline"]);
    assert_ok(&out, "train --baseline");
    let out = run(&["evaluate", "--config", &cfg, "--ckpt", &base, "--split", "val"]);
    assert_ok(&out, "evaluate baseline checkpoint");

    let ab = dir.path().join("ab");
    let out = run(&["ab", "--config", &cfg, "--seeds", "1", "--out", &s(&ab)]);
    assert_ok(&out, "ab");
    let table = std::fs::read_to_string(ab.join("ab_comparison.csv")).unwrap();
    assert!(table.starts_with("seed,baseline_ap,consistent_ap,delta\n"));
    assert_eq!(table.lines().count(), 3, "header, one seed, median");
    assert!(table.lines().last().unwrap().starts_with("median,"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "bogus.key = 1\n").unwrap();
    let out = run(&["train", "--config", &s(&bad), "--out", &s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("bogus.key"), "{stderr}");

    let out = run(&["train", "--config", &s(&dir.path().join("missing.cfg")), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "missing config file is a config error");

    // Usage errors from the argument parser share the config exit code.
    let out = run(&["evaluate", "--config", &s(&bad), "--ckpt", "x", "--split", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(dir.path());
    let out = run(&[
        "evaluate",
        "--config",
        &s(&cfg),
        "--ckpt",
        &s(&dir.path().join("missing.ckpt")),
        "--split",
        "val",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    assert_ok(&out, "--help");
    let stdout = String::from_utf8(out.stdout).unwrap();
    for sub in ["generate-data", "train", "evaluate", "analyze", "ab"] {
        assert!(stdout.contains(sub), "help missing {sub}");
    }
}
