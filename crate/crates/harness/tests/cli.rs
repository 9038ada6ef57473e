use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mnist-mini")
}

fn thin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thin"))
        .args(args)
        .env_remove("THIN_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn configuration_errors_exit_with_two() {
    let out = thin(&["train", "--dataset", "mnist_r", "--variant", "thin", "--lambda", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let out = thin(&[
        "train",
        "--dataset",
        "dsprites_synth",
        "--variant",
        "oracle",
        "--gating",
        "exo_concat",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = thin(&["train", "--dataset", "nope", "--variant", "thin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_mnist_explains_the_download() {
    let out = thin(&["train", "--dataset", "mnist_r", "--variant", "baseline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("THIN_DATA_DIR"));

    let empty = tempfile::tempdir().unwrap();
    let out = thin(&[
        "--data-dir",
        empty.path().to_str().unwrap(),
        "generate-data",
        "--dataset",
        "mnist_r",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("train-images-idx3-ubyte.gz") && err.contains("gunzip"),
        "{err}"
    );
}

#[test]
fn negative_control_exits_nonzero() {
    let out = thin(&["gradcheck", "--negative-control"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn train_then_eval_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let data = fixture_dir();
    let common = [
        "--out-dir",
        out_dir,
        "--data-dir",
        data.to_str().unwrap(),
        "--max-steps",
        "4",
        "--val-size",
        "0",
        "--test-limit",
        "40",
    ];
    let mut args = common.to_vec();
    args.extend([
        "train",
        "--dataset",
        "mnist_r",
        "--variant",
        "exo_tree_gated",
        "--seed",
        "2",
    ]);
    let out = thin(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["status"], "ok");
    assert_eq!(r["steps"], 4);

    let ckpt = dir
        .path()
        .join("runs")
        .join(r["digest"].as_str().unwrap())
        .join("checkpoint.bin");
    let mut args = common.to_vec();
    args.extend(["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    let out = thin(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let e: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(e["samples"], 40);
    assert_eq!(
        e["accuracy"].as_f64().unwrap() * 100.0,
        r["test_accuracy"].as_f64().unwrap()
    );

    // a pretrained exogenous network is not a model checkpoint
    let exo = std::fs::read_dir(dir.path().join("exo"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut args = common.to_vec();
    let exo_ckpt = exo.join("checkpoint.bin");
    args.extend(["eval", "--checkpoint", exo_ckpt.to_str().unwrap()]);
    assert_eq!(thin(&args).status.code(), Some(2));
}
