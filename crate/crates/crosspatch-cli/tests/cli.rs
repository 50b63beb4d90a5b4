//! End-to-end smoke tests for the `crosspatch` binary: generate a toy pair,
//! collect divergences, score the factorial, and check exit-code mapping.

use std::path::Path;
use std::process::{Command, Output};

fn crosspatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crosspatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = crosspatch(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn toy_diverge_factorial_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();

    ok(&[
        "gen-toy",
        "--mode",
        "gated-coupling",
        "--seed",
        "7",
        "--prompts",
        "48",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert!(d.join("pt.xckpt").is_file());
    assert!(d.join("it.xckpt").is_file());
    assert!(d.join("manifest.jsonl").is_file());

    ok(&[
        "diverge",
        "--pt",
        &p("pt.xckpt"),
        "--it",
        &p("it.xckpt"),
        "--manifest",
        &p("manifest.jsonl"),
        "--budget",
        "48",
        "--out",
        &p("events.jsonl"),
    ]);
    assert!(d.join("events.jsonl").is_file());

    let out = ok(&[
        "factorial",
        "--pt",
        &p("pt.xckpt"),
        "--it",
        &p("it.xckpt"),
        "--events",
        &p("events.jsonl"),
        "--bootstrap",
        "200",
        "--out",
        &p("factorial.json"),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("interaction"), "stdout: {stdout}");

    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("factorial.json")).unwrap()).unwrap();
    assert!(parsed["n_events"].as_u64().unwrap() > 0);
    assert!(parsed["interaction_bootstrap"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_checkpoint_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("nope.xckpt");
    let out = crosspatch(&[
        "diverge",
        "--pt",
        gone.to_str().unwrap(),
        "--it",
        gone.to_str().unwrap(),
        "--manifest",
        gone.to_str().unwrap(),
        "--out",
        dir.path().join("events.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn report_on_empty_dir_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!Path::new(&dir.path().join("factorial.json")).exists());
    let out = crosspatch(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
