//! The unified run configuration.
//!
//! A run starts from the defaults (or a named preset), overlays the JSON
//! document given with `--config`, then applies command-line flags. Unknown
//! keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use scenediff::data::{FilterConfig, SynthConfig};
use scenediff::ddpm::GuidanceConfig;
use scenediff::denoiser::DenoiserConfig;
use scenediff::objectives::TrainConfig;
use scenediff::relations::PredicateConfig;

use crate::CliError;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory from `synth` with the run seed.
    Synthetic { scenes: usize },
    /// A directory with `objects.json` and `relationships.json`, filtered by `filter`.
    Raw { dir: PathBuf },
    /// A directory written by the `synth` command.
    Paired { dir: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    /// `train.seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub filter: FilterConfig,
    pub predicates: PredicateConfig,
    pub synth: SynthConfig,
    pub data: Option<DataSource>,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub embedding_seed: u64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            filter: FilterConfig::default(),
            predicates: PredicateConfig::default(),
            synth: SynthConfig::default(),
            data: None,
            split: [0.8, 0.1, 0.1],
            embedding_seed: 0,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

pub const PRESETS: [&str; 1] = ["synth-small"];

impl RunConfig {
    /// A named starting point.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "synth-small" => {
                let relations: Vec<String> = ["left", "right", "front", "behind"].iter().map(|s| s.to_string()).collect();
                Ok(Self {
                    model: DenoiserConfig {
                        n_max: 6,
                        hidden: 32,
                        rgcn_layers: 2,
                        heads: 2,
                        bases: 2,
                        time_dim: 16,
                        ..DenoiserConfig::default()
                    },
                    train: TrainConfig {
                        batch_size: 8,
                        epochs: 5,
                        lr: 1e-3,
                        plateau_patience: 10,
                        steps: 100,
                        ..TrainConfig::default()
                    },
                    filter: FilterConfig {
                        relation_whitelist: relations.clone(),
                        max_objects: 6,
                        ..FilterConfig::default()
                    },
                    synth: SynthConfig {
                        relations,
                        n_max: 6,
                        max_objects: 6,
                        max_relations: 4,
                        ..SynthConfig::default()
                    },
                    data: Some(DataSource::Synthetic { scenes: 20 }),
                    ..Self::default()
                })
            }
            other => Err(CliError::Input(format!(
                "unknown preset `{other}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Starts from `preset` (or the defaults) and overlays the document at `path`.
    pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<Self, CliError> {
        let base = match preset {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        let Some(path) = path else {
            return Ok(base);
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), e.line())))?;
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        merge(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Checks every section and the agreements between them.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        self.filter.validate()?;
        self.predicates.validate()?;
        if self.train.prediction_target != self.guidance.prediction_target {
            return Err(CliError::Input(
                "train.prediction_target and guidance.prediction_target disagree".into(),
            ));
        }
        if !(self.split.iter().all(|r| *r >= 0.0) && (self.split.iter().sum::<f64>() - 1.0).abs() < 1e-9) {
            return Err(CliError::Input(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        match &self.data {
            Some(DataSource::Synthetic { scenes }) => {
                self.synth.validate()?;
                if *scenes == 0 {
                    return Err(CliError::Input("data.scenes must be positive".into()));
                }
                if self.synth.n_max != self.model.n_max {
                    return Err(CliError::Input(format!(
                        "synth.n_max {} differs from model.n_max {}",
                        self.synth.n_max, self.model.n_max
                    )));
                }
            }
            Some(DataSource::Raw { .. }) => {
                if self.filter.max_objects > self.model.n_max {
                    return Err(CliError::Input(format!(
                        "filter.max_objects {} exceeds model.n_max {}",
                        self.filter.max_objects, self.model.n_max
                    )));
                }
            }
            Some(DataSource::Paired { .. }) | None => {}
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Recursive object merge; non-object values in `overlay` replace the base.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn overlay_keeps_untouched_fields() {
        let f = write(r#"{"model": {"hidden": 64}, "seed": 7}"#);
        let cfg = RunConfig::load(Some(f.path()), Some("synth-small")).unwrap();
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.model.n_max, 6);
        assert_eq!(cfg.seed, 7);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write(r#"{"model": {"hiden": 64}}"#);
        assert!(RunConfig::load(Some(f.path()), None).is_err());
        let f = write(r#"{"extra": 1}"#);
        assert!(RunConfig::load(Some(f.path()), None).is_err());
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        let mut cfg = RunConfig::preset("synth-small").unwrap();
        cfg.synth.n_max = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::preset("synth-small").unwrap();
        cfg.split = [0.5, 0.1, 0.1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
