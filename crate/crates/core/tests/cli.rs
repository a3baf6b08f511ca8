use std::path::{Path, PathBuf};
use std::process::Command;

fn naim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_naim"))
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn gradcheck_exits_zero() {
    let out = naim().arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("naim_end_to_end"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(naim().arg("grid").output().unwrap().status.code(), Some(1));
    let out = naim().args(["grid", "--config", "/nonexistent.json", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(naim().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(naim().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn train_then_evaluate_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let config = root().join("configs/toy.json");
    let out = naim()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--max-epochs", "3", "--method", "naim", "--out"])
        .arg(&ckpt)
        .arg("--history")
        .arg(dir.path().join("h.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("h.csv").exists());
    let preds = dir.path().join("p.csv");
    let out = naim()
        .args(["evaluate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(root().join("data/toy.csv"))
        .args(["--test-missing", "0.25", "--predictions"])
        .arg(&preds)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc"));
    assert_eq!(std::fs::read_to_string(preds).unwrap().lines().count(), 161);
}

#[test]
fn impute_fills_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("filled.csv");
    let out = naim()
        .arg("impute")
        .arg("--data")
        .arg(root().join("data/toy.csv"))
        .arg("--schema")
        .arg(root().join("data/toy.schema.json"))
        .args(["--method", "knn", "--missing", "0.3", "--out"])
        .arg(&out_csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_csv).unwrap();
    assert_eq!(text.lines().count(), 161);
    assert!(text.lines().skip(1).all(|l| l.split(',').all(|c| !c.is_empty())));
}
