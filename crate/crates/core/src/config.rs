//! Pipeline configuration. Every key is optional; missing keys take the
//! defaults below.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CovariateRule, SensorMeta, TailMode};
use crate::discrepancy::ErrorSettings;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_LEAD_MAX, DEFAULT_LEAD_MIN};
use crate::forecaster::TrainConfig;
use crate::interpret::DEFAULT_TOP_K;
use crate::score::{CalibrationMethod, WeightMode, DEFAULT_SIGNIFICANCE};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub asset_id: Option<String>,
    pub preprocess: PreprocessConfig,
    pub forecaster: TrainConfig,
    pub discrepancy: DiscrepancyConfig,
    pub gmm: GmmConfig,
    pub scoring: ScoringConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Resampling step in seconds; `None` keeps the native grid.
    pub step: Option<i64>,
    pub scaling: bool,
    pub covariate_rules: Vec<CovariateRule>,
    /// Last training timestamp (inclusive). Takes precedence over
    /// `train_fraction`.
    pub train_end: Option<String>,
    /// Leading share of rows used for training when `train_end` is unset.
    pub train_fraction: f64,
    /// Per-column tail mode overrides, keyed by `system.sensor.summary`
    /// or by system name.
    pub tail_modes: BTreeMap<String, TailMode>,
    /// Per-column weight overrides, keyed like `tail_modes`.
    pub weights: BTreeMap<String, f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            step: None,
            scaling: true,
            covariate_rules: Vec::new(),
            train_end: None,
            train_fraction: 1.0,
            tail_modes: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscrepancyConfig {
    pub default: ErrorSettings,
    pub systems: BTreeMap<String, ErrorSettings>,
    pub sensors: BTreeMap<String, ErrorSettings>,
}

impl DiscrepancyConfig {
    pub fn for_sensor(&self, meta: &SensorMeta) -> ErrorSettings {
        self.sensors
            .get(&meta.column())
            .or_else(|| self.systems.get(&meta.system))
            .copied()
            .unwrap_or(self.default)
    }
}

/// Number of mixture components: a fixed count or BIC selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Components {
    Fixed(usize),
    Auto,
}

impl Default for Components {
    fn default() -> Self {
        Components::Auto
    }
}

impl Serialize for Components {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Components::Fixed(m) => s.serialize_u64(*m as u64),
            Components::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for Components {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("component count must be at least 1")),
            Raw::N(m) => Ok(Components::Fixed(m)),
            Raw::S(s) if s == "auto" => Ok(Components::Auto),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a count or \"auto\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: Components,
    /// Per-system overrides of `components`.
    pub systems: BTreeMap<String, Components>,
    pub m_max: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            components: Components::Auto,
            systems: BTreeMap::new(),
            m_max: 3,
            max_iter: crate::gmm::DEFAULT_MAX_ITER,
            tol: crate::gmm::DEFAULT_TOL,
            seed: 0,
        }
    }
}

impl GmmConfig {
    pub fn for_system(&self, system: &str) -> Components {
        self.systems.get(system).copied().unwrap_or(self.components)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub weight_mode: WeightMode,
    pub significance: f64,
    pub max_gap: usize,
    pub top_k: usize,
    pub calibration: CalibrationMethod,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            weight_mode: WeightMode::Hierarchy,
            significance: DEFAULT_SIGNIFICANCE,
            max_gap: 0,
            top_k: DEFAULT_TOP_K,
            calibration: CalibrationMethod::Gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Detection,
    Predictive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub mode: EvalMode,
    /// Seconds.
    pub lead_min: i64,
    /// Seconds.
    pub lead_max: i64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            mode: EvalMode::Detection,
            lead_min: DEFAULT_LEAD_MIN,
            lead_max: DEFAULT_LEAD_MAX,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Argument(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.forecaster;
        if f.window == 0 || f.hidden == 0 || f.batch_size == 0 {
            return Err(Error::arg("forecaster window, hidden and batch_size must be positive"));
        }
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be positive"));
        }
        let p = &self.preprocess;
        if !(p.train_fraction > 0.0 && p.train_fraction <= 1.0) {
            return Err(Error::arg("train_fraction must lie in (0, 1]"));
        }
        if matches!(p.step, Some(s) if s <= 0) {
            return Err(Error::arg("resampling step must be positive"));
        }
        let d = &self.discrepancy;
        for s in std::iter::once(&d.default).chain(d.systems.values()).chain(d.sensors.values()) {
            s.validate()?;
        }
        if self.gmm.m_max == 0 {
            return Err(Error::arg("gmm.m_max must be at least 1"));
        }
        let s = &self.scoring;
        if !(s.significance > 0.0 && s.significance < 1.0) {
            return Err(Error::arg("significance must lie in (0, 1)"));
        }
        if s.top_k == 0 {
            return Err(Error::arg("top_k must be at least 1"));
        }
        if self.evaluation.lead_min > self.evaluation.lead_max {
            return Err(Error::arg("lead_min exceeds lead_max"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = crate::artifact::to_canonical_json(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::ErrorMode;

    #[test]
    fn empty_object_gives_defaults() {
        let c = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.forecaster.window, 120);
        assert_eq!(c.forecaster.epochs, 30);
        assert_eq!(c.scoring.significance, 0.01);
        assert_eq!(c.scoring.top_k, 5);
        assert_eq!(c.gmm.components, Components::Auto);
        assert_eq!(c.discrepancy.default.smoothing, 0.1);
        assert_eq!(c.evaluation.lead_max, 7 * 86_400);
    }

    #[test]
    fn overrides_and_lookup() {
        let c = PipelineConfig::from_json(
            r#"{"gmm": {"components": 1, "systems": {"amperage": 2}},
                "discrepancy": {"systems": {"monitron": {"mode": "area"}}},
                "forecaster": {"window": 24}}"#,
        )
        .unwrap();
        assert_eq!(c.forecaster.window, 24);
        assert_eq!(c.forecaster.hidden, 32);
        assert_eq!(c.gmm.for_system("amperage"), Components::Fixed(2));
        assert_eq!(c.gmm.for_system("other"), Components::Fixed(1));
        let s = c.discrepancy.for_sensor(&SensorMeta::new("monitron", "temp", "mean"));
        assert_eq!((s.mode, s.half_width, s.smoothing), (ErrorMode::Area, 2, 0.0));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_json(r#"{"scoring": {"significance": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"gmm": {"components": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"gmm": {"components": "many"}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"nonsense": 1}"#).is_err());
        assert!(PipelineConfig::from_json("[").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        assert_eq!(a.hash(), PipelineConfig::from_json("{}").unwrap().hash());
        let mut b = a.clone();
        b.forecaster.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
