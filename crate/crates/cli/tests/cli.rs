use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn hgo(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hgo"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "hgo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, run) = (dir.path().join("ds"), dir.path().join("run"));
    let cfg = config("tiny.json");
    hgo(&["synth", "--out", s(&ds), "-n", "20", "--seed", "1"]);
    assert_eq!(fs::read_dir(ds.join("images")).unwrap().count(), 20);

    hgo(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&ds),
        "--out",
        s(&run),
        "--steps",
        "2",
    ]);
    let weights = run.join("weights.hgow");
    assert!(weights.exists());
    assert_eq!(
        fs::read_to_string(run.join("loss.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let dets = dir.path().join("dets.txt");
    let annotated = dir.path().join("out.ppm");
    let image = ds.join("images/0000.ppm");
    hgo(&[
        "--config",
        s(&cfg),
        "infer",
        "--weights",
        s(&weights),
        "--image",
        s(&image),
        "--output",
        s(&annotated),
        "--dets",
        s(&dets),
        "--conf",
        "0.001",
    ]);
    assert!(fs::read(&annotated).unwrap().starts_with(b"P6"));
    for line in fs::read_to_string(&dets).unwrap().lines() {
        assert_eq!(line.split_whitespace().count(), 6, "{line}");
    }

    // Labels echoed back as predictions score perfectly.
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    for entry in fs::read_dir(ds.join("labels")).unwrap() {
        let path = entry.unwrap().path();
        let text: String = fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(|l| format!("{l} 0.9\n"))
            .collect();
        fs::write(preds.join(path.file_name().unwrap()), text).unwrap();
    }
    let summary = dir.path().join("eval.json");
    hgo(&[
        "eval",
        "--labels",
        s(&ds.join("labels")),
        "--preds",
        s(&preds),
        "--json",
        s(&summary),
    ]);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(doc["summary"]["map50"], 1.0);
}

#[test]
fn cost_report_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cost.json");
    let out = hgo(&[
        "--config",
        s(&config("hgo-n.json")),
        "cost",
        "--json",
        s(&path),
        "--size",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("f16 weight file"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let rows = doc["rows"].as_array().unwrap();
    let sum: u64 = rows.iter().map(|r| r["macs"].as_u64().unwrap()).sum();
    assert_eq!(doc["macs"].as_u64().unwrap(), sum);
    assert!(doc["head_share"].as_f64().unwrap() < 0.5);
}

#[test]
fn bad_input_exits_with_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_hgo"))
        .args(["--config", "/nonexistent.json", "summary"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}
