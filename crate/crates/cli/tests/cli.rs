use std::path::Path;
use std::process::{Command, Output};

const SCENARIO: &str = r#"{
  "seed": 5,
  "asset_id": "pump",
  "length": 1500,
  "rho_dep": 0.4,
  "systems": [
    {"name": "amperage", "sensors": ["a", "b"], "summaries": ["current"], "noise": 0.05},
    {"name": "monitron", "sensors": ["m"], "summaries": ["temperature", "velocity"], "amplitude": 0.5, "noise": 0.05}
  ],
  "regime": {"name": "mode", "on": [48, 96], "off": [12, 24]},
  "anomalies": [
    {"kind": "level_shift", "sensors": ["monitron.m.temperature"], "start": 1200, "duration": 50, "magnitude": 5.0}
  ]
}"#;

const CONFIG: &str = r#"{
  "asset_id": "pump",
  "preprocess": {"train_fraction": 0.6},
  "forecaster": {"window": 12, "hidden": 8, "epochs": 10, "learning_rate": 0.01, "batch_size": 32},
  "gmm": {"m_max": 2},
  "scoring": {"significance": 0.001, "max_gap": 6}
}"#;

fn m2ad(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2ad"))
        .args(args)
        .current_dir(dir)
        .env("M2AD_THREADS", "2")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scenario.json"), SCENARIO).unwrap();
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    ok(&m2ad(&["simulate", "--scenario", "scenario.json", "--out", "data.csv"], dir.path()));
    dir
}

#[test]
fn simulate_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    let first = std::fs::read(p.join("data.csv")).unwrap();
    let labels = std::fs::read_to_string(p.join("data.labels.csv")).unwrap();
    assert!(labels.starts_with("signal,start,end,kind\n"));
    assert_eq!(labels.lines().count(), 2);
    ok(&m2ad(&["simulate", "--scenario", "scenario.json", "--out", "again.csv"], p));
    assert_eq!(first, std::fs::read(p.join("again.csv")).unwrap());
}

#[test]
fn train_detect_evaluate() {
    let dir = setup();
    let p = dir.path();
    let summary = ok(&m2ad(
        &["train", "--data", "data.csv", "--config", "config.json", "--out", "model.json"],
        p,
    ));
    assert!(summary.contains("alpha"));
    let model = std::fs::read(p.join("model.json")).unwrap();
    ok(&m2ad(
        &["train", "--data", "data.csv", "--config", "config.json", "--out", "model2.json"],
        p,
    ));
    assert_eq!(model, std::fs::read(p.join("model2.json")).unwrap());

    ok(&m2ad(&["detect", "--model", "model.json", "--data", "data.csv", "--out", "events.json"], p));
    let events: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("events.json")).unwrap()).unwrap();
    assert_eq!(events["asset_id"], "pump");
    assert!(!events["events"].as_array().unwrap().is_empty());
    let scores = std::fs::read_to_string(p.join("events.scores.csv")).unwrap();
    assert!(scores.starts_with("timestamp,score,flag\n"));
    assert_eq!(scores.lines().count(), 1 + 600);

    let report = ok(&m2ad(
        &["evaluate", "--events", "events.json", "--labels", "data.labels.csv", "--out", "report.txt"],
        p,
    ));
    assert!(report.contains("tp = 1\n"), "{report}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["tp"], 1);
    assert_eq!(json["fn"], 0);
}

#[test]
fn detect_tolerates_missing_and_unknown_columns() {
    let dir = setup();
    let p = dir.path();
    ok(&m2ad(
        &["train", "--data", "data.csv", "--config", "config.json", "--out", "model.json"],
        p,
    ));
    let data = std::fs::read_to_string(p.join("data.csv")).unwrap();
    let header: Vec<&str> = data.lines().next().unwrap().split(',').collect();
    let drop = header.iter().position(|h| *h == "amperage.b.current").unwrap();
    let edited: String = data
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let mut cells: Vec<&str> = line.split(',').collect();
            cells.remove(drop);
            cells.push(if i == 0 { "extra.x.y" } else { "1" });
            cells.join(",") + "\n"
        })
        .collect();
    std::fs::write(p.join("partial.csv"), edited).unwrap();
    let out = m2ad(&["detect", "--model", "model.json", "--data", "partial.csv", "--out", "ev.json"], p);
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("extra.x.y") && stderr.contains("amperage.b.current"), "{stderr}");
    let events: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("ev.json")).unwrap()).unwrap();
    assert_eq!(events["absent_sensors"][0], "amperage.b.current");
    assert_eq!(events["effective_weights"]["amperage.b.current"], 0.0);
}

#[test]
fn evaluate_toy_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let events = r#"{"asset_id": "s", "threshold": 1.0, "scored_from": 0, "scored_to": 100,
        "absent_sensors": [], "ignored_columns": [], "effective_weights": {},
        "events": [
          {"start": 5, "end": 15, "peak_score": 2.0, "peak_time": 10, "contributors": []},
          {"start": 40, "end": 45, "peak_score": 2.0, "peak_time": 42, "contributors": []}
        ]}"#;
    std::fs::write(p.join("events.json"), events).unwrap();
    std::fs::write(
        p.join("labels.csv"),
        "signal,start,end,kind\ns,10,20,anomaly\ns,60,70,anomaly\ns,172815,172900,work_order\n",
    )
    .unwrap();
    let text = ok(&m2ad(&["evaluate", "--events", "events.json", "--labels", "labels.csv"], p));
    assert!(text.contains("tp = 1\nfp = 1\nfn = 1\n"), "{text}");
    let text = ok(&m2ad(
        &["evaluate", "--events", "events.json", "--labels", "labels.csv", "--mode", "predictive"],
        p,
    ));
    assert!(text.contains("tp = 1\nfp = 0\nfn = 0\n"), "{text}");
    let text = ok(&m2ad(
        &[
            "evaluate", "--events", "events.json", "--labels", "labels.csv", "--mode", "predictive", "--lead-min",
            "3d",
        ],
        p,
    ));
    assert!(text.contains("tp = 0\nfp = 2\nfn = 1\n"), "{text}");

    let out = m2ad(&["evaluate", "--events", "events.json", "--labels", "nope.csv"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
    let out = m2ad(&["evaluate", "--events", "events.json", "--labels", "labels.csv", "--mode", "other"], p);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_props_has_unit_ratio_row() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&m2ad(&["verify-props", "--out", "props.txt"], dir.path()));
    assert!(text.contains("2 2 100 1.000000e0"), "{text}");
    assert!(dir.path().join("props.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    let p = dir.path();
    let out = m2ad(&["simulate", "--scenario", "missing.json", "--out", "x.csv"], p);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(p.join("wide.json"), r#"{"forecaster": {"window": 2000}}"#).unwrap();
    let out = m2ad(&["train", "--data", "data.csv", "--config", "wide.json", "--out", "m.json"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));

    std::fs::write(p.join("old.json"), r#"{"format_version": 0}"#).unwrap();
    let out = m2ad(&["detect", "--model", "old.json", "--data", "data.csv", "--out", "e.json"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn diverging_training_exits_3() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(
        p.join("hot.json"),
        r#"{"preprocess": {"train_fraction": 0.6}, "forecaster": {"window": 8, "hidden": 4, "epochs": 3, "learning_rate": 1e300}}"#,
    )
    .unwrap();
    let out = m2ad(&["train", "--data", "data.csv", "--config", "hot.json", "--out", "m.json"], p);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
