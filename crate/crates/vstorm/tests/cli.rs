//! End-to-end checks of the command-line interface: exit codes, manifest
//! re-execution, and the baseline/variational switches.

use std::path::Path;
use std::process::Command;

fn vstorm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vstorm"))
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_code_2() {
    let out = vstorm()
        .args(["reconstruct", "--checkpoint", "/nonexistent.vsck", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    let out = vstorm().args(["train", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn full_pipeline_with_rerun_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let phantom_cfg = write_cfg(
        root,
        "phantom.cfg",
        "height = 32\nwidth = 32\nn_slice = 2\nframes_per_slice = 12\nfourier_rows = 8\n",
    );
    let status = vstorm()
        .args(["make-phantom", "--seed", "5"])
        .arg("--config")
        .arg(&phantom_cfg)
        .arg("--out")
        .arg(root.join("ph"))
        .status()
        .unwrap();
    assert!(status.success());
    let dataset = root.join("ph/phantom.vskt");
    assert!(dataset.is_file());

    let train_cfg = write_cfg(root, "train.cfg", "stages = 4:6,1:4\nquiet = true\n");
    let status = vstorm()
        .args(["train", "--seed", "9", "--threads", "1"])
        .arg("--config")
        .arg(&train_cfg)
        .arg("--dataset")
        .arg(&dataset)
        .arg("--out")
        .arg(root.join("tr"))
        .status()
        .unwrap();
    assert!(status.success());

    // Out-of-range slice: documented usage error.
    let out = vstorm()
        .args(["reconstruct", "--source-slice", "7", "--threads", "1"])
        .arg("--checkpoint")
        .arg(root.join("tr/checkpoint.vsck"))
        .arg("--out")
        .arg(root.join("bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let status = vstorm()
        .args(["reconstruct", "--source-slice", "1", "--threads", "1"])
        .arg("--checkpoint")
        .arg(root.join("tr/checkpoint.vsck"))
        .arg("--dataset")
        .arg(&dataset)
        .arg("--out")
        .arg(root.join("rec"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.join("rec/metrics.csv").is_file());
    assert!(root.join("rec/latents.csv").is_file());
    assert!(root.join("rec/images/f0000_s0.png").is_file());
    assert!(root.join("rec/images/f0000_s0.pgm").is_file());

    // Re-execute train from its manifest: checkpoints and CSVs must be
    // byte-identical.
    let status = vstorm()
        .args(["rerun", "--threads", "1"])
        .arg("--manifest")
        .arg(root.join("tr/manifest.txt"))
        .arg("--out")
        .arg(root.join("tr2"))
        .status()
        .unwrap();
    assert!(status.success());
    let a = std::fs::read(root.join("tr/checkpoint.vsck")).unwrap();
    let b = std::fs::read(root.join("tr2/checkpoint.vsck")).unwrap();
    assert_eq!(a, b, "rerun checkpoint differs");
    let a = std::fs::read(root.join("tr/train_report.csv")).unwrap();
    let b = std::fs::read(root.join("tr2/train_report.csv")).unwrap();
    assert_eq!(a, b, "rerun report differs");
}

#[test]
fn baseline_mode_reports_zero_kl_and_zero_epochs_keep_init() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let phantom_cfg = write_cfg(
        root,
        "phantom.cfg",
        "height = 32\nwidth = 32\nn_slice = 1\nframes_per_slice = 8\nfourier_rows = 8\n",
    );
    assert!(vstorm()
        .args(["make-phantom", "--seed", "3"])
        .arg("--config")
        .arg(&phantom_cfg)
        .arg("--out")
        .arg(root.join("ph"))
        .status()
        .unwrap()
        .success());
    let dataset = root.join("ph/phantom.vskt");

    let train_cfg = write_cfg(root, "t.cfg", "stages = 2:5\nquiet = true\n");
    assert!(vstorm()
        .args(["train", "--seed", "4", "--mode", "gstorm-baseline"])
        .arg("--config")
        .arg(&train_cfg)
        .arg("--dataset")
        .arg(&dataset)
        .arg("--out")
        .arg(root.join("base"))
        .status()
        .unwrap()
        .success());
    let report = std::fs::read_to_string(root.join("base/train_report.csv")).unwrap();
    for line in report.lines().skip(1) {
        let kl: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(kl, 0.0, "baseline KL column must be zero: {line}");
    }

    // epochs = 0: identical checkpoints across runs, no history.
    for name in ["e0a", "e0b"] {
        assert!(vstorm()
            .args(["train", "--seed", "4", "--epochs", "0"])
            .arg("--dataset")
            .arg(&dataset)
            .arg("--out")
            .arg(root.join(name))
            .status()
            .unwrap()
            .success());
    }
    let a = std::fs::read(root.join("e0a/checkpoint.vsck")).unwrap();
    let b = std::fs::read(root.join("e0b/checkpoint.vsck")).unwrap();
    assert_eq!(a, b);
    let report = std::fs::read_to_string(root.join("e0a/train_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1, "only the header expected");
}

#[test]
fn mnist_command_emits_montages_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_cfg(
        root,
        "m.cfg",
        "source = synthetic\nmax_images = 24\nepochs = 40\ngrid_res = 4\nquiet = true\n",
    );
    assert!(vstorm()
        .args(["mnist", "--seed", "2"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(root.join("mn"))
        .status()
        .unwrap()
        .success());
    for f in [
        "originals.png",
        "zero_filled.png",
        "reconstructions.png",
        "manifold.png",
        "manifold.pgm",
        "metrics.csv",
        "checkpoint.vsck",
        "manifest.txt",
    ] {
        assert!(root.join("mn").join(f).is_file(), "missing {f}");
    }
}
