//! End-to-end smoke test of the command-line interface on a small scene.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_queeng"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn queeng");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("queeng-cli-{name}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn synth_train_detect_eval_roundtrip() {
    let dir = tmpdir("e2e");
    let x1 = p(&dir, "x1.hsi");
    let x2 = p(&dir, "x2.hsi");
    let gt = p(&dir, "gt.pgm");
    run_ok(&[
        "synth", "--height", "24", "--width", "24", "--bands", "8", "--seed", "7", "--out-x1",
        &x1, "--out-x2", &x2, "--out-gt", &gt,
    ]);

    let cfg = p(&dir, "cfg.json");
    std::fs::write(&cfg, r#"{"max_epochs":12,"slic_scale":8,"seed":3}"#).unwrap();
    let model = p(&dir, "model.ckpt");
    run_ok(&["train", "--x1", &x1, "--x2", &x2, "--gt", &gt, "--config", &cfg, "--out", &model]);
    assert!(dir.join("model.ckpt").exists());
    let csv = std::fs::read_to_string(dir.join("model.ckpt.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,loss,"));
    assert_eq!(csv.lines().count(), 13, "header + one row per epoch");

    let map = p(&dir, "map.pgm");
    run_ok(&["detect", "--model", &model, "--x1", &x1, "--x2", &x2, "--out-map", &map]);

    // Detection is deterministic: a second run writes identical bytes.
    let map2 = p(&dir, "map2.pgm");
    run_ok(&["detect", "--model", &model, "--x1", &x1, "--x2", &x2, "--out-map", &map2]);
    assert_eq!(std::fs::read(&map).unwrap(), std::fs::read(&map2).unwrap());

    let csv_out = p(&dir, "eval.csv");
    let overlay = p(&dir, "overlay.pgm");
    run_ok(&[
        "eval", "--map", &map, "--gt", &gt, "--out-csv", &csv_out, "--out-overlay", &overlay,
    ]);
    let eval = std::fs::read_to_string(&csv_out).unwrap();
    assert!(eval.starts_with("oa,kappa,f1,"));
    assert_eq!(eval.lines().count(), 2);

    // Evaluating the ground truth against itself gives OA = 1.
    let perfect = p(&dir, "perfect.csv");
    run_ok(&["eval", "--map", &gt, "--gt", &gt, "--out-csv", &perfect]);
    let row = std::fs::read_to_string(&perfect).unwrap();
    assert!(row.lines().nth(1).unwrap().starts_with("1.000000,1.000000,1.000000"));

    run_ok(&[
        "preprocess", "--x1", &x1, "--x2", &x2, "--gt", &gt, "--slic-scale", "8",
        "--out-labels", &p(&dir, "labels.pgm"), "--out-sam", &p(&dir, "sam.pgm"),
    ]);
    assert!(dir.join("labels.pgm").exists());
    assert!(dir.join("sam.pgm").exists());
}

#[test]
fn circuit_dump_prints_unitary() {
    let out = run_ok(&["circuit-dump", "--qubits", "3", "--reps", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 9, "comment line + 8 matrix rows");
    assert!(lines[0].starts_with('#'));
    assert_eq!(lines[1].split(' ').count(), 8);
}

#[test]
fn failures_exit_nonzero_with_json_error() {
    let out = bin()
        .args(["detect", "--model", "/nonexistent.ckpt", "--x1", "a", "--x2", "b", "--out-map", "c"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("stderr line is JSON");
    assert!(parsed.get("error").is_some());
}
