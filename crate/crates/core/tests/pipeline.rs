use m2ad::artifact::{ModelArtifact, FORMAT_VERSION};
use m2ad::config::PipelineConfig;
use m2ad::data::AssetFrame;
use m2ad::error::Error;
use m2ad::eval::{match_detection, Interval};
use m2ad::pipeline::{detect, fit, DetectOptions};
use m2ad::synth::{generate, AnomalyKind, AnomalySpec, RegimeSchedule, SynthConfig, SynthSystem};

fn scenario(anomalies: Vec<AnomalySpec>) -> SynthConfig {
    SynthConfig {
        seed: 3,
        length: 1500,
        rho_dep: 0.4,
        systems: vec![
            SynthSystem {
                name: "amperage".into(),
                sensors: vec!["a".into(), "b".into()],
                summaries: vec!["current".into()],
                noise: 0.05,
                ..SynthSystem::default()
            },
            SynthSystem {
                name: "monitron".into(),
                sensors: vec!["m".into()],
                summaries: vec!["temperature".into(), "velocity".into()],
                amplitude: 0.5,
                noise: 0.05,
                ..SynthSystem::default()
            },
        ],
        regime: Some(RegimeSchedule {
            name: "mode".into(),
            on: [48, 96],
            off: [12, 24],
        }),
        anomalies,
        ..SynthConfig::default()
    }
}

fn config() -> PipelineConfig {
    PipelineConfig::from_json(
        r#"{"asset_id": "test",
            "preprocess": {"train_fraction": 0.6},
            "forecaster": {"window": 12, "hidden": 8, "epochs": 12, "learning_rate": 0.01, "batch_size": 32},
            "gmm": {"m_max": 2},
            "scoring": {"significance": 0.001, "max_gap": 6}}"#,
    )
    .unwrap()
}

fn level_shift() -> AnomalySpec {
    AnomalySpec {
        kind: AnomalyKind::LevelShift,
        sensors: vec!["monitron.m.temperature".into()],
        start: 1200,
        duration: 50,
        magnitude: 5.0,
    }
}

fn intervals(det: &m2ad::pipeline::Detection) -> Vec<Interval> {
    det.events.iter().map(|e| Interval { start: e.start, end: e.end }).collect()
}

#[test]
fn level_shift_is_detected() {
    let g = generate(&scenario(vec![level_shift()])).unwrap();
    let (artifact, summary) = fit(&g.frame, &config()).unwrap();
    assert_eq!(summary.train_rows, 900);
    assert!(artifact.calibration.alpha > 0.0 && artifact.calibration.theta > 0.0);
    let det = detect(&artifact, &g.frame, &DetectOptions::default()).unwrap();
    assert!(det.timestamps[0] > artifact.provenance.train_end);
    let truth: Vec<Interval> = g.truth.iter().map(|l| l.interval()).collect();
    let m = match_detection(&intervals(&det), &truth);
    assert_eq!(m.counts.tp, 1, "{:?}", det.events);
    let hit = det
        .events
        .iter()
        .find(|e| e.start <= truth[0].end && e.end >= truth[0].start)
        .unwrap();
    assert_eq!(hit.contributors[0].column, "monitron.m.temperature");
    assert!(hit.contributors.len() <= 5);
}

#[test]
fn training_regime_data_is_rarely_flagged() {
    let mut long = scenario(vec![]);
    long.length = 3000;
    let g = generate(&long).unwrap();
    let mut cfg = config();
    cfg.preprocess.train_fraction = 0.5;
    let (artifact, _) = fit(&g.frame, &cfg).unwrap();
    let det = detect(&artifact, &g.frame, &DetectOptions::default()).unwrap();
    assert!(det.flags.len() > 1400);
    let rate = det.flags.iter().filter(|&&f| f).count() as f64 / det.flags.len() as f64;
    assert!(rate <= 0.03, "{rate}");
}

fn drop_sensor(frame: &AssetFrame, column: &str) -> AssetFrame {
    let mut f = frame.clone();
    let k = f.sensor_index(column).unwrap();
    f.sensors.remove(k);
    f.sensor_meta.remove(k);
    f
}

#[test]
fn absent_and_unknown_columns() {
    let g = generate(&scenario(vec![level_shift()])).unwrap();
    let (artifact, _) = fit(&g.frame, &config()).unwrap();

    let mut data = drop_sensor(&g.frame, "amperage.b.current");
    let mut extra = data.sensor_meta[0].clone();
    extra.name = "spare".into();
    data.sensor_meta.push(extra);
    data.sensors.push(vec![0.0; data.len()]);

    let det = detect(&artifact, &data, &DetectOptions::default()).unwrap();
    assert_eq!(det.absent_sensors, vec!["amperage.b.current".to_string()]);
    assert_eq!(det.ignored_columns, vec!["amperage.spare.current".to_string()]);
    let w = &det.effective_weights;
    let k = artifact.sensors.iter().position(|m| m.column() == "amperage.b.current").unwrap();
    assert_eq!(w[k], 0.0);
    assert!((w.iter().sum::<f64>() - artifact.calibration.weights.iter().sum::<f64>()).abs() < 1e-12);
    assert!(det.scores.iter().all(Option::is_some));
}

#[test]
fn artifacts_are_deterministic_and_round_trip() {
    let g = generate(&scenario(vec![])).unwrap();
    let (a, _) = fit(&g.frame, &config()).unwrap();
    let (b, _) = fit(&g.frame, &config()).unwrap();
    let json = a.to_json().unwrap();
    assert_eq!(json, b.to_json().unwrap());
    let back = ModelArtifact::from_json(&json).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_json().unwrap(), json);
    assert_eq!(a.format_version, FORMAT_VERSION);
    assert_eq!(a.provenance.config_hash, config().hash());

    let bumped = json.replacen(
        &format!("\"format_version\": {FORMAT_VERSION}"),
        "\"format_version\": 2",
        1,
    );
    assert!(matches!(ModelArtifact::from_json(&bumped), Err(Error::Version { found: 2, .. })));
}

#[test]
fn window_longer_than_training_is_rejected() {
    let g = generate(&scenario(vec![])).unwrap();
    let mut cfg = config();
    cfg.forecaster.window = 900;
    let err = fit(&g.frame, &cfg).unwrap_err();
    assert!(matches!(err.root(), Error::Argument(_)), "{err}");
}

#[test]
fn ablation_is_deterministic() {
    use m2ad::synth::{run_ablation, Variant};
    let g = generate(&scenario(vec![level_shift()])).unwrap();
    let a = run_ablation(&g.frame, &g.truth, &config(), &Variant::ALL).unwrap();
    let b = run_ablation(&g.frame, &g.truth, &config(), &Variant::ALL).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|r| r.report.tp + r.report.fn_ == 1));
}
