use std::path::Path;
use std::process::{Command, Output};

fn nmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nmt(args);
    assert!(out.status.success(), "nmt {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert!(ok(&["--help"]).contains("translate"));
    assert!(ok(&["train", "--help"]).contains("--reduce-patience"));
    assert!(!ok(&["--version"]).is_empty());
}

#[test]
fn usage_errors() {
    assert_eq!(nmt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nmt(&["train", "--no-such-flag"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("missing.sqnt"));
    let out = nmt(&["translate", "--model", &missing]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let hyp = dir.path().join("h.txt");
    std::fs::write(&hyp, "a b\n").unwrap();
    let r = dir.path().join("r.txt");
    std::fs::write(&r, "a b\nc d\n").unwrap();
    assert_eq!(nmt(&["evaluate", "--hyp", &s(&hyp), "--ref", &s(&r)]).status.code(), Some(1));
}

#[test]
fn evaluate_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.txt");
    std::fs::write(&f, "the cat sat on the mat\nhello there big world\n").unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(&["evaluate", "--hyp", &s(&f), "--ref", &s(&f)])).unwrap();
    assert!((v["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn small_pipeline_with_factors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = (s(&dir.path().join("data")), s(&dir.path().join("model")));
    ok(&["gen-data", "--task", "copy", "--vocab-size", "12", "--train", "200", "--dev", "20", "--test", "10", "--max-len", "5", "--casing", "--out-dir", &data]);
    let train = ["train", "--data-dir", &data, "--out-dir", &model, "--max-steps", "40", "--checkpoint-interval", "20", "--factors-scheme", "sf-case"];
    let summary: serde_json::Value = serde_json::from_str(&ok(&train)).unwrap();
    assert_eq!(summary["steps"], 40);
    // an existing output directory needs --force
    assert_eq!(nmt(&train).status.code(), Some(1));

    let input = dir.path().join("in.txt");
    std::fs::write(&input, "Baba BEBE\n\nbibi\n").unwrap();
    let f32m = format!("{model}/model.sqnt");
    let hyp = dir.path().join("hyp.txt");
    let lat = dir.path().join("lat.json");
    ok(&["translate", "--model", &f32m, "--input", &s(&input), "--output", &s(&hyp), "--latency", &s(&lat), "--case-scheme", "sf-case"]);
    let lines: Vec<String> = std::fs::read_to_string(&hyp).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&lat).unwrap()).unwrap();
    assert_eq!(report["count"], 3);
    assert!(report["p90_ms"].as_f64().unwrap() >= report["p50_ms"].as_f64().unwrap());

    let bench: serde_json::Value =
        serde_json::from_str(&ok(&["benchmark", "--model", &f32m, "--input", &s(&input), "--repeat", "2", "--case-scheme", "sf-case"])).unwrap();
    assert_eq!(bench["identical"], true);
}
