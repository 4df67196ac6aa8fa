//! Drives the binary through every verb on a tiny configuration.

use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_causal-sarcasm");

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 10] = ["--set", "d=16", "--set", "d_c=16", "--set", "d_f=8", "--set", "ffn_dim=32", "--set", "epochs=2"];

#[test]
fn every_verb_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), "d = 16\nd_c = 16\nd_f = 8\nffn_dim = 32\nepochs = 2\n").unwrap();

    run(dir, &["gen-data", "--config", "tiny.toml", "--seed", "1", "--num-samples", "6", "--out", "data"]);
    assert_eq!(std::fs::read_to_string(dir.join("data/manifest.csv")).unwrap().lines().count(), 7);
    assert!(dir.join("data/vocab.txt").exists());

    let mut train = vec!["train", "--data", "data", "--out", "run", "--seed", "1", "--plot"];
    train.extend(TINY);
    let run_id = run(dir, &train);
    assert_eq!(run_id.trim().len(), 12);
    for f in ["checkpoint.json", "report.json", "loss_curve.csv", "loss_curve.svg", "config.toml"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/report.json")).unwrap()).unwrap();
    assert!(report["interventions"]["do_f"].is_object());

    let mut resume = vec!["train", "--data", "data", "--out", "run", "--resume", "--set", "epochs=3"];
    resume.extend(&TINY[..8]);
    run(dir, &resume);
    let curve = std::fs::read_to_string(dir.join("run/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3, "one header plus one step per epoch at 6 samples / batch 8");

    let eval: serde_json::Value = serde_json::from_str(&run(dir, &["eval", "--checkpoint", "run/checkpoint.json", "--data", "data", "--seed", "0"])).unwrap();
    assert!(eval["classification"]["weighted_f1"].is_number());

    let a = run(dir, &["intervene", "--checkpoint", "run/checkpoint.json", "--data", "data", "--seed", "4"]);
    let b = run(dir, &["intervene", "--checkpoint", "run/checkpoint.json", "--data", "data", "--seed", "4"]);
    assert_eq!(a, b);

    run(dir, &["export-features", "--data", "data", "--out", "exp", "--format", "bin", "--checkpoint", "run/checkpoint.json", "--seed", "0"]);
    assert!(dir.join("exp/fused/s00000_M.bin").exists());

    let rows: Vec<String> = (0..30).map(|i| format!("{},{}", if i < 15 { 0.0 } else { 5.0 }, i % 3)).collect();
    std::fs::write(dir.join("frames.csv"), rows.join("\n")).unwrap();
    for mode in ["broadcast", "append"] {
        let out = run(dir, &["keyframes", "--input", "frames.csv", "--k", "2", "--c", "10", "--alpha", "0.1", "--seed", "3", "--time-mode", mode]);
        let idx: Vec<usize> = out.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(idx.len(), 2);
        assert!(idx[0] < 15 && idx[1] >= 15, "{mode}: {idx:?}");
    }
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .current_dir(tmp.path())
        .args(["gen-data", "--out", "x", "--set", "n_heads=3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_heads"));
}
