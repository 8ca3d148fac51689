use std::process::Command;

use learnpanel::estimator::FitResult;
use learnpanel::harness::io::{read_json, read_panel_file};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_learnpanel"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_estimate_decompose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(bin().args(["simulate", "--n", "200", "--seed", "7", "--out"]).arg(&a));
    run(bin().args(["simulate", "--n", "200", "--seed", "7", "--out"]).arg(&b));
    let pa = std::fs::read(a.join("panel.csv")).unwrap();
    assert_eq!(pa, std::fs::read(b.join("panel.csv")).unwrap());
    assert_eq!(read_panel_file(&a.join("panel.csv")).unwrap().len(), 200);

    run(bin().args(["estimate", "--input"]).arg(a.join("panel.csv")).arg("--out").arg(&a));
    let fit: FitResult = read_json(&a.join("fit.json")).unwrap();
    assert_eq!(fit.free_names.len(), 32);
    let q = std::fs::read_to_string(a.join("quantiles.csv")).unwrap();
    assert!(q.starts_with("alpha,quantile\n"));
    assert_eq!(q.lines().count(), 92);

    let text = run(bin().args(["decompose", "--path", "1,2,2", "--period", "2", "--draws", "5000", "--fit"]).arg(a.join("fit.json")).arg("--out").arg(&a));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn rejects_zero_based_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["decompose", "--path", "0,1,1", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
}
