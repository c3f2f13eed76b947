//! Run configuration: one JSON document with dotted-key overrides.
//!
//! Every field has a default, so `{}` is a complete config. Keys that do
//! not exist in the schema are rejected with [`MoonError::UnknownKey`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::{Organ, Task};
use crate::error::{io_err, MoonError, Result};
use crate::harness::TrainConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcamConfig {
    pub organ: Organ,
    pub task: Task,
    /// Fraction of hottest voxels used by the localization score.
    pub top_frac: f64,
    /// Cases to explain; empty means every G3 case.
    pub cases: Vec<String>,
    pub write_pgm: bool,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        Self {
            organ: Organ::Esophagus,
            task: Task::G3,
            top_frac: 0.05,
            cases: Vec::new(),
            write_pgm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_folds: usize,
    /// One training run per seed; each replaces the model, training and
    /// split seeds.
    pub seeds: Vec<u64>,
    pub gradcam: GradcamConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            seeds: vec![0],
            gradcam: GradcamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training (or cross-validation) manifest.
    pub manifest: Option<PathBuf>,
    /// Independent test manifest.
    pub test_manifest: Option<PathBuf>,
    /// Trained model to evaluate or explain.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

/// Reports the first key of `given` that is absent from `schema`.
fn find_unknown(given: &Value, schema: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(s)) = (given, schema) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            None => return Some(path),
            Some(sv) => {
                if let Some(p) = find_unknown(v, sv, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

/// Sets `key` (dotted path) in `doc`; the path must already exist.
fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| MoonError::UnknownKey(key.to_string()))?,
            _ => return Err(MoonError::UnknownKey(key.to_string())),
        };
    }
    *cur = value;
    Ok(())
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let schema = serde_json::to_value(Self::default())?;
        if let Some(key) = find_unknown(&value, &schema, "") {
            return Err(MoonError::UnknownKey(key));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| MoonError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| MoonError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| MoonError::Config(format!("override `{item}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key.trim(), value)?;
        }
        Self::from_value(doc)
    }

    /// Uses one seed everywhere.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.k_folds < 2 {
            return Err(MoonError::Config("eval.k_folds must be at least 2".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(MoonError::Config("eval.seeds must not be empty".into()));
        }
        let f = self.eval.gradcam.top_frac;
        if !(f > 0.0 && f <= 1.0) {
            return Err(MoonError::Config("eval.gradcam.top_frac must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionStrategy;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn dump_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.model.fusion = FusionStrategy::LowRank;
        cfg.data.manifest = Some("data/manifest.json".into());
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert!(matches!(err, MoonError::UnknownKey(k) if k == "train.epochz"));
        let err = RunConfig::default().with_overrides(&["model.nope=1".into()]).unwrap_err();
        assert!(matches!(err, MoonError::UnknownKey(k) if k == "model.nope"));
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.epochs=7".into(),
                "model.fusion=FiLM".into(),
                "model.single_organ=esophagus".into(),
                "synth.counts=[1,2,3]".into(),
                "data.manifest=/tmp/m.json".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.fusion, FusionStrategy::Film);
        assert_eq!(cfg.model.single_organ, Some(Organ::Esophagus));
        assert_eq!(cfg.synth.counts, [1, 2, 3]);
        assert_eq!(cfg.data.manifest.as_deref(), Some(Path::new("/tmp/m.json")));
    }

    #[test]
    fn ill_typed_values_are_config_errors() {
        let err = RunConfig::default().with_overrides(&["train.epochs=many".into()]).unwrap_err();
        assert!(matches!(err, MoonError::Config(_)));
    }
}
