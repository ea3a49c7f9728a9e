//! Versioned, canonical JSON model artifacts.

use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::data::{ResolvedRule, SensorMeta};
use crate::discrepancy::ErrorSettings;
use crate::error::{Error, Result};
use crate::forecaster::{Lstm, TrainReport};
use crate::gmm::Gmm;
use crate::score::Calibration;

pub const FORMAT_VERSION: u32 = 1;

/// Serializes with sorted object keys and shortest round-trip floats, so
/// equal values always produce equal bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

/// Preprocessing state needed to reproduce training-time inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub step: Option<i64>,
    pub covariate_names: Vec<String>,
    pub covariate_levels: Vec<Option<usize>>,
    pub covariate_rules: Vec<ResolvedRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub train_start: i64,
    /// Last training timestamp, inclusive.
    pub train_end: i64,
    pub train_rows: usize,
    /// Epoch seconds; left empty unless the caller supplies a time, so
    /// reruns stay byte-identical.
    pub created: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub asset_id: String,
    pub sensors: Vec<SensorMeta>,
    pub forecaster: Lstm<f64>,
    pub train_report: TrainReport,
    pub error_settings: Vec<ErrorSettings>,
    pub gmms: Vec<Gmm<f64>>,
    pub calibration: Calibration<f64>,
    pub preprocessing: Preprocessing,
    pub config: PipelineConfig,
    pub provenance: Provenance,
}

impl ModelArtifact {
    pub fn validate(&self) -> Result<()> {
        let d = self.sensors.len();
        if self.gmms.len() != d || self.error_settings.len() != d || self.calibration.weights.len() != d {
            return Err(Error::Schema(format!(
                "artifact has {d} sensors but {} mixtures, {} error settings and {} weights",
                self.gmms.len(),
                self.error_settings.len(),
                self.calibration.weights.len()
            )));
        }
        if self.forecaster.outputs != d {
            return Err(Error::Schema("forecaster output width differs from sensor count".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: ModelArtifact = versioned_from_json(text, FORMAT_VERSION)?;
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read model {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn versioned_from_json<T: DeserializeOwned>(text: &str, expected: u32) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Schema("missing format_version".into()))?;
    if found != u64::from(expected) {
        return Err(Error::Version {
            found: found as u32,
            expected,
        });
    }
    Ok(serde_json::from_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn canonical_json_sorts_keys() {
        let mut m = BTreeMap::new();
        m.insert("b", 0.1f64);
        m.insert("a", 1e-300);
        #[derive(Serialize)]
        struct S {
            z: u8,
            y: BTreeMap<&'static str, f64>,
        }
        let s = to_canonical_json(&S { z: 1, y: m }).unwrap();
        assert!(s.find("\"y\"").unwrap() < s.find("\"z\"").unwrap());
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
        assert!(s.contains("1e-300"));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let err = ModelArtifact::from_json(r#"{"format_version": 99}"#).unwrap_err();
        assert!(matches!(err, Error::Version { found: 99, expected: FORMAT_VERSION }));
        assert!(matches!(ModelArtifact::from_json("{}"), Err(Error::Schema(_))));
    }
}
