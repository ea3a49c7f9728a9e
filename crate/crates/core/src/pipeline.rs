//! Training and detection end to end.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{ModelArtifact, Preprocessing, Provenance, FORMAT_VERSION};
use crate::config::{Components, PipelineConfig};
use crate::data::{
    apply_rules, discretize_covariates, interpolate, make_windows, parse_timestamp, resample_median,
    AssetFrame, ResolvedRule, Scaling, SensorMeta, SplitSpec,
};
use crate::discrepancy::{compute_errors, ErrorSettings};
use crate::error::{Error, Result};
use crate::forecaster::{Lstm, TrainReport};
use crate::gmm::{em_fit, select_components, Gmm};
use crate::interpret::{contributions, top_k, Contributor};
use crate::score::{
    calibrate, calibrate_chi_square, default_weights, effective_weights, extract_events, fisher_score, flag,
    Calibration, CalibrationMethod,
};

/// A frame ready for the forecaster: covariates coded, gaps filled, sensors
/// scaled. `missing[k][t]` remembers which cells were originally absent.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub frame: AssetFrame,
    pub missing: Vec<Vec<bool>>,
    pub train_rows: usize,
    pub scaling: Scaling,
    pub rules: Vec<ResolvedRule>,
}

/// Applies per-column overrides from the config to the frame's metadata.
fn apply_meta_overrides(frame: &mut AssetFrame, cfg: &PipelineConfig) {
    fn pick<V: Copy>(map: &BTreeMap<String, V>, meta: &SensorMeta) -> Option<V> {
        map.get(&meta.column()).or_else(|| map.get(&meta.system)).copied()
    }
    for meta in &mut frame.sensor_meta {
        if let Some(t) = pick(&cfg.preprocess.tail_modes, meta) {
            meta.tail_mode = t;
        }
        if let Some(w) = pick(&cfg.preprocess.weights, meta) {
            meta.weight = Some(w);
        }
    }
}

fn train_rows(frame: &AssetFrame, cfg: &PipelineConfig) -> Result<usize> {
    let n = frame.len();
    let rows = match &cfg.preprocess.train_end {
        Some(s) => {
            let end = parse_timestamp(s)
                .ok_or_else(|| Error::arg(format!("cannot parse train_end {s:?}")))?;
            frame.timestamps.partition_point(|&t| t <= end)
        }
        None => ((n as f64) * cfg.preprocess.train_fraction).floor() as usize,
    };
    if rows <= cfg.forecaster.window {
        return Err(Error::arg(format!(
            "{rows} training rows do not exceed the window size {}",
            cfg.forecaster.window
        )));
    }
    Ok(rows)
}

pub fn prepare(frame: &AssetFrame, cfg: &PipelineConfig) -> Result<Prepared> {
    let mut frame = match cfg.preprocess.step {
        Some(step) => resample_median(frame, step)?,
        None => frame.clone(),
    };
    frame.validate()?;
    apply_meta_overrides(&mut frame, cfg);
    let rows = train_rows(&frame, cfg)?;
    let split = SplitSpec { train_end: rows };
    let (frame, rules) = discretize_covariates(&frame, split, &cfg.preprocess.covariate_rules)?;
    frame.input_width()?;
    let missing = frame.missing_mask();
    let filled = interpolate(&frame);
    let scaling = if cfg.preprocess.scaling {
        Scaling::fit(&filled, split)?
    } else {
        identity_scaling(filled.n_sensors())
    };
    Ok(Prepared {
        frame: scaling.apply(&filled),
        missing,
        train_rows: rows,
        scaling,
        rules,
    })
}

fn identity_scaling(d: usize) -> Scaling {
    Scaling {
        min: vec![-1.0; d],
        max: vec![1.0; d],
    }
}

pub fn train_forecaster(prep: &Prepared, cfg: &PipelineConfig) -> Result<(Lstm<f64>, TrainReport)> {
    let f = &cfg.forecaster;
    let data = make_windows::<f64>(&prep.frame, f.window, 0..prep.train_rows)?;
    let mut model = Lstm::init(data.width, f.hidden, data.n_targets, f.seed)?;
    model.config = f.clone();
    model.scaling = Some(prep.scaling.clone());
    model.train(&data, f.epochs, f.learning_rate, f.patience, f.seed)
}

/// Per-sensor error series over the prediction rows of `range`, together
/// with a mask of cells that were originally missing.
pub struct SensorErrors {
    pub indices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub missing: Vec<Vec<bool>>,
}

pub fn sensor_errors(
    model: &Lstm<f64>,
    frame: &AssetFrame,
    missing: &[Vec<bool>],
    settings: &[ErrorSettings],
    range: std::ops::Range<usize>,
) -> Result<SensorErrors> {
    let preds = model.predict_series(frame, range)?;
    let errs = compute_errors(&frame.sensors, &preds, settings)?;
    let miss = missing
        .iter()
        .map(|col| errs.indices.iter().map(|&t| col[t]).collect())
        .collect();
    Ok(SensorErrors {
        indices: errs.indices,
        values: errs.values,
        missing: miss,
    })
}

fn present(errors: &[f64], missing: &[bool]) -> Vec<f64> {
    errors
        .iter()
        .zip(missing)
        .filter(|(_, &m)| !m)
        .map(|(&e, _)| e)
        .collect()
}

pub fn fit_mixtures(errors: &SensorErrors, meta: &[SensorMeta], cfg: &PipelineConfig) -> Result<Vec<Gmm<f64>>> {
    let g = &cfg.gmm;
    (0..meta.len())
        .into_par_iter()
        .map(|k| {
            let xs = present(&errors.values[k], &errors.missing[k]);
            let mut fit = match g.for_system(&meta[k].system) {
                Components::Fixed(m) => em_fit(&xs, m, g.seed, g.max_iter, g.tol),
                Components::Auto => select_components(&xs, g.m_max, g.seed).map(|(f, _)| f),
            }
            .map_err(|e| match e {
                Error::Argument(msg) | Error::DegenerateData(msg) => {
                    Error::DegenerateData(format!("sensor {}: {msg}", meta[k].column()))
                }
                other => other,
            })?;
            fit.tail_mode = meta[k].tail_mode;
            Ok(fit)
        })
        .collect()
}

/// Column-major p-values; NaN where the underlying observation was missing.
pub fn p_values(errors: &SensorErrors, gmms: &[Gmm<f64>]) -> Vec<Vec<f64>> {
    errors
        .values
        .par_iter()
        .zip(&errors.missing)
        .zip(gmms)
        .map(|((col, miss), g)| {
            col.iter()
                .zip(miss)
                .map(|(&e, &m)| if m { f64::NAN } else { g.p_value(e) })
                .collect()
        })
        .collect()
}

pub fn calibrate_scores(
    weights: &[f64],
    train_scores: &[f64],
    cfg: &PipelineConfig,
) -> Result<Calibration<f64>> {
    let sig = cfg.scoring.significance;
    match cfg.scoring.calibration {
        CalibrationMethod::Gamma => calibrate(weights, train_scores, sig),
        CalibrationMethod::ChiSquare => calibrate_chi_square(weights, train_scores, sig),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub train_rows: usize,
    pub components: Vec<usize>,
    pub train_flag_rate: f64,
}

/// Everything fitted after the forecaster, for a given trained model.
pub fn fit_scoring(
    prep: &Prepared,
    model: Lstm<f64>,
    report: TrainReport,
    cfg: &PipelineConfig,
) -> Result<(ModelArtifact, FitSummary)> {
    let meta = prep.frame.sensor_meta.clone();
    let settings: Vec<ErrorSettings> = meta.iter().map(|m| cfg.discrepancy.for_sensor(m)).collect();
    let errors = sensor_errors(&model, &prep.frame, &prep.missing, &settings, 0..prep.train_rows)
        .map_err(|e| e.in_stage("discrepancy"))?;
    let gmms = fit_mixtures(&errors, &meta, cfg).map_err(|e| e.in_stage("sensor_score"))?;
    let pv = p_values(&errors, &gmms);
    let weights = default_weights(&meta, cfg.scoring.weight_mode).map_err(|e| e.in_stage("asset_score"))?;
    let scores = fisher_score(&pv, &weights).map_err(|e| e.in_stage("asset_score"))?;
    let train_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let calibration = calibrate_scores(&weights, &train_scores, cfg).map_err(|e| e.in_stage("asset_score"))?;
    let flagged = flag(&scores, calibration.threshold).iter().filter(|&&f| f).count();

    let ts = &prep.frame.timestamps;
    let artifact = ModelArtifact {
        format_version: FORMAT_VERSION,
        asset_id: cfg.asset_id.clone().unwrap_or_else(|| "asset".into()),
        sensors: meta,
        forecaster: model,
        train_report: report,
        error_settings: settings,
        gmms,
        calibration,
        preprocessing: Preprocessing {
            step: cfg.preprocess.step,
            covariate_names: prep.frame.covariate_names.clone(),
            covariate_levels: prep.frame.covariate_levels.clone(),
            covariate_rules: prep.rules.clone(),
        },
        config: cfg.clone(),
        provenance: Provenance {
            config_hash: cfg.hash(),
            train_start: ts[0],
            train_end: ts[prep.train_rows - 1],
            train_rows: prep.train_rows,
            created: None,
        },
    };
    let summary = FitSummary {
        train_rows: prep.train_rows,
        components: artifact.gmms.iter().map(Gmm::n_components).collect(),
        train_flag_rate: flagged as f64 / scores.len().max(1) as f64,
    };
    Ok((artifact, summary))
}

/// Trains a complete model on the training part of `frame`.
pub fn fit(frame: &AssetFrame, cfg: &PipelineConfig) -> Result<(ModelArtifact, FitSummary)> {
    cfg.validate()?;
    let prep = prepare(frame, cfg).map_err(|e| e.in_stage("data_model"))?;
    let (model, report) = train_forecaster(&prep, cfg).map_err(|e| e.in_stage("forecaster"))?;
    fit_scoring(&prep, model, report, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub start: i64,
    pub end: i64,
    pub peak_score: f64,
    pub peak_time: i64,
    pub contributors: Vec<Contributor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectOptions {
    /// Score rows at or before the training end as well.
    pub score_all: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub asset_id: String,
    pub threshold: f64,
    pub timestamps: Vec<i64>,
    pub scores: Vec<Option<f64>>,
    pub flags: Vec<bool>,
    pub events: Vec<EventRecord>,
    /// Sensors in the model that the data did not contain.
    pub absent_sensors: Vec<String>,
    /// Data columns the model does not know.
    pub ignored_columns: Vec<String>,
    /// Weights after redistributing the mass of absent sensors.
    pub effective_weights: Vec<f64>,
}

/// Errors, p-values and scores for a frame under a trained artifact.
pub struct Scored {
    pub timestamps: Vec<i64>,
    pub errors: SensorErrors,
    pub pvalues: Vec<Vec<f64>>,
    pub scores: Vec<Option<f64>>,
    pub absent: Vec<String>,
    pub ignored: Vec<String>,
}

/// Reorders `frame` to the artifact's columns. Absent sensors become
/// all-missing columns.
fn align(artifact: &ModelArtifact, frame: &AssetFrame) -> (AssetFrame, Vec<usize>, Vec<String>) {
    let n = frame.len();
    let mut absent = Vec::new();
    let sensors = artifact
        .sensors
        .iter()
        .enumerate()
        .map(|(k, m)| match frame.sensor_index(&m.column()) {
            Some(i) => frame.sensors[i].clone(),
            None => {
                absent.push(k);
                vec![f64::NAN; n]
            }
        })
        .collect();
    let pre = &artifact.preprocessing;
    let covariates = pre
        .covariate_names
        .iter()
        .map(|name| match frame.covariate_index(name) {
            Some(i) => frame.covariates[i].clone(),
            None => vec![f64::NAN; n],
        })
        .collect();
    let known: Vec<String> = artifact.sensors.iter().map(SensorMeta::column).collect();
    let mut ignored: Vec<String> = frame
        .sensor_meta
        .iter()
        .map(SensorMeta::column)
        .filter(|c| !known.contains(c))
        .collect();
    ignored.extend(
        frame
            .covariate_names
            .iter()
            .filter(|c| !pre.covariate_names.contains(c))
            .map(|c| format!("cov.{c}")),
    );
    let aligned = AssetFrame {
        timestamps: frame.timestamps.clone(),
        sensors,
        covariates,
        sensor_meta: artifact.sensors.clone(),
        covariate_names: pre.covariate_names.clone(),
        covariate_levels: pre.covariate_levels.clone(),
    };
    (aligned, absent, ignored)
}

pub fn score(artifact: &ModelArtifact, frame: &AssetFrame) -> Result<Scored> {
    artifact.validate()?;
    let frame = match artifact.preprocessing.step {
        Some(step) => resample_median(frame, step).map_err(|e| e.in_stage("data_model"))?,
        None => frame.clone(),
    };
    let (aligned, absent, ignored) = align(artifact, &frame);
    let mut coded = aligned;
    if !artifact.preprocessing.covariate_rules.is_empty() {
        coded = apply_rules(&coded, &artifact.preprocessing.covariate_rules).map_err(|e| e.in_stage("data_model"))?;
    }
    coded.covariate_levels = artifact.preprocessing.covariate_levels.clone();
    let mut missing = coded.missing_mask();
    let filled = interpolate(&coded);
    let model = &artifact.forecaster;
    let scaling = model.scaling.clone().unwrap_or_else(|| identity_scaling(filled.n_sensors()));
    let mut scaled = scaling.apply(&filled);
    for &k in &absent {
        scaled.sensors[k].iter_mut().for_each(|v| *v = 0.0);
        missing[k].iter_mut().for_each(|m| *m = true);
    }
    let errors = sensor_errors(model, &scaled, &missing, &artifact.error_settings, 0..scaled.len())
        .map_err(|e| e.in_stage("discrepancy"))?;
    let pvalues = p_values(&errors, &artifact.gmms);
    let scores = fisher_score(&pvalues, &artifact.calibration.weights).map_err(|e| e.in_stage("asset_score"))?;
    Ok(Scored {
        timestamps: errors.indices.iter().map(|&t| scaled.timestamps[t]).collect(),
        errors,
        pvalues,
        scores,
        absent: absent.iter().map(|&k| artifact.sensors[k].column()).collect(),
        ignored,
    })
}

/// First scored position to report: rows after the training end, unless
/// the data lies entirely within the training period or `score_all` is set.
pub fn first_reported(scored: &Scored, artifact: &ModelArtifact, opts: &DetectOptions) -> usize {
    if opts.score_all {
        return 0;
    }
    let start = scored.timestamps.partition_point(|&t| t <= artifact.provenance.train_end);
    if start == scored.timestamps.len() {
        0
    } else {
        start
    }
}

pub fn detect(artifact: &ModelArtifact, frame: &AssetFrame, opts: &DetectOptions) -> Result<Detection> {
    let scored = score(artifact, frame)?;
    let from = first_reported(&scored, artifact, opts);
    let cal = &artifact.calibration;
    let scores = scored.scores[from..].to_vec();
    let flags = flag(&scores, cal.threshold);
    let cfg = &artifact.config;
    let events = extract_events(&flags, &scores, cfg.scoring.max_gap)?;
    let mut row = vec![0.0; artifact.sensors.len()];
    let records = events
        .into_iter()
        .map(|ev| {
            let at = from + ev.peak_index;
            for (r, col) in row.iter_mut().zip(&scored.pvalues) {
                *r = col[at];
            }
            let ranking = contributions(&row, &cal.weights, ev.peak_score).map_err(|e| e.in_stage("interpret"))?;
            Ok(EventRecord {
                start: scored.timestamps[from + ev.start],
                end: scored.timestamps[from + ev.end],
                peak_score: ev.peak_score,
                peak_time: scored.timestamps[at],
                contributors: top_k(&ranking, &artifact.sensors, cfg.scoring.top_k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let avail: Vec<f64> = artifact
        .sensors
        .iter()
        .map(|m| if scored.absent.contains(&m.column()) { f64::NAN } else { 1.0 })
        .collect();
    let effective = effective_weights(&avail, &cal.weights).unwrap_or_else(|| vec![0.0; avail.len()]);
    Ok(Detection {
        asset_id: artifact.asset_id.clone(),
        threshold: cal.threshold,
        timestamps: scored.timestamps[from..].to_vec(),
        scores,
        flags,
        events: records,
        absent_sensors: scored.absent,
        ignored_columns: scored.ignored,
        effective_weights: effective,
    })
}

/// The events file written by detection: flagged intervals plus the facts
/// needed to read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFile {
    pub asset_id: String,
    pub threshold: f64,
    pub scored_from: Option<i64>,
    pub scored_to: Option<i64>,
    pub absent_sensors: Vec<String>,
    pub ignored_columns: Vec<String>,
    pub effective_weights: BTreeMap<String, f64>,
    pub events: Vec<EventRecord>,
}

impl Detection {
    pub fn event_file(&self, sensors: &[SensorMeta]) -> EventFile {
        EventFile {
            asset_id: self.asset_id.clone(),
            threshold: self.threshold,
            scored_from: self.timestamps.first().copied(),
            scored_to: self.timestamps.last().copied(),
            absent_sensors: self.absent_sensors.clone(),
            ignored_columns: self.ignored_columns.clone(),
            effective_weights: sensors
                .iter()
                .zip(&self.effective_weights)
                .map(|(m, &w)| (m.column(), w))
                .collect(),
            events: self.events.clone(),
        }
    }

    /// `timestamp,score,flag` rows; missing scores are left empty.
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("timestamp,score,flag\n");
        for ((t, sc), f) in self.timestamps.iter().zip(&self.scores).zip(&self.flags) {
            let v = sc.map_or_else(String::new, |v| v.to_string());
            s.push_str(&format!("{t},{v},{}\n", u8::from(*f)));
        }
        s
    }
}
