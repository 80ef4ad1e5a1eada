use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smokewatch(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_smokewatch")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "smokewatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_eval_with_fixture_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    smokewatch(&["synth", "--seed", "3", "--train", "2", "--val", "6", "--out", s(&out)]);
    assert!(out.join("val.jsonl").exists());
    let ckpt = fixtures().join("detector.smkw");
    let report = smokewatch(&[
        "eval",
        "images",
        "--manifest",
        s(&out.join("val.jsonl")),
        "--checkpoint",
        s(&ckpt),
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    let c = &v["counts"];
    let total: u64 = ["tp", "tn", "fp", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 6);
    assert!(v["metrics"]["accuracy"].is_number());
}

#[test]
fn delays_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let human = dir.path().join("human.json");
    std::fs::write(
        &model,
        r#"[{"event_id":"a","smoke_start":0,"detected_at":30},{"event_id":"b","smoke_start":0,"detected_at":200},
            {"event_id":"c","smoke_start":0,"detected_at":null}]"#,
    )
    .unwrap();
    std::fs::write(&human, r#"[{"event_id":"a","smoke_start":0,"detected_at":330}]"#).unwrap();
    let out = smokewatch(&["eval", "delays", "--model", s(&model), "--human", s(&human), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let pct: Vec<f64> = v["time_to_detect"]["buckets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["percent"].as_f64().unwrap())
        .collect();
    assert_eq!(pct, [50.0, 50.0, 100.0, 100.0]);
    assert_eq!(v["time_to_detect"]["missed"], 1);
    assert_eq!(v["advantage"]["mean_seconds"], 300.0);
    let table = smokewatch(&["eval", "delays", "--model", s(&model)]);
    assert!(String::from_utf8(table.stdout).unwrap().contains("missed 1"));
}

#[test]
fn detect_and_replay() {
    let ckpt = fixtures().join("detector.smkw");
    let out = smokewatch(&["detect", "--image", s(&fixtures().join("frames/smoke.png")), "--checkpoint", s(&ckpt)]);
    let boxes: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!boxes.is_empty());
    assert!(boxes[0]["x1"].as_f64().unwrap() <= 256.0);

    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    std::fs::write(&log, "").unwrap();
    let summary = smokewatch(&["replay", "--log", s(&log)]);
    assert!(String::from_utf8(summary.stdout).unwrap().contains("alerts     0"));

    std::fs::write(&log, "{\"v\":1,\"seq\":1}\nnot json\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_smokewatch"))
        .args(["replay", "--log", s(&log)])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
