use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_orchard-graph");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn threshold(manifest: &Path) -> f64 {
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
    m["config"]["classify"]["threshold"].as_f64().unwrap()
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("stand.csv");
    let trunks = dir.path().join("trunks.csv");
    let config = dir.path().join("cfg.toml");
    let out = dir.path().join("out.csv");
    std::fs::write(&config, "[classify]\nthreshold = 0.9\n").unwrap();
    let sim = run(&["simulate", "--rows", "1", "--per-row", "1", "--out", s(&cloud), "--trunks-out", s(&trunks)]);
    assert!(sim.status.success());

    let base = ["analyze", "-i", s(&cloud), "-o", s(&out), "--trunks", s(&trunks)];
    assert!(run(&base).status.success());
    let manifest = dir.path().join("out.csv.manifest.json");
    assert_eq!(threshold(&manifest), 0.216);

    let mut args = vec!["--config", s(&config)];
    args.extend(base);
    assert!(run(&args).status.success());
    assert_eq!(threshold(&manifest), 0.9);

    args.extend(["--threshold", "0.3"]);
    assert!(run(&args).status.success());
    assert_eq!(threshold(&manifest), 0.3);
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("out.csv");
    let r = run(&["analyze", "-i", s(&missing), "-o", s(&out), "--no-detect"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("analyze: configuration error"));

    let r = run(&["find-trunks", "-i", s(&missing), "-o", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("find-trunks: i/o error"));
}

#[test]
fn eval_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let trunks = dir.path().join("t.csv");
    let metrics = dir.path().join("m.csv");
    std::fs::write(&trunks, "x,y,z,tree_id\n0,0,0,1\n5,0,0,2\n").unwrap();
    let r = run(&["eval", "trunks", "--pred", s(&trunks), "--truth", s(&trunks), "--out", s(&metrics)]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.contains("f1,1\n"), "{text}");
}
