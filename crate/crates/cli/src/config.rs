use std::path::{Path, PathBuf};

use relate::datagen::{normalize, standardize, GeneratorSpec, PairBatch};
use relate::energy_isa::IsaConfig;
use relate::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    None,
    /// Zero mean, unit norm per image.
    Normalize,
    /// Zero mean, unit variance per pixel.
    #[default]
    Standardize,
}

impl Preprocess {
    pub fn apply(self, batch: &PairBatch) -> PairBatch {
        let (out, report) = match self {
            Preprocess::None => return batch.clone(),
            Preprocess::Normalize => normalize(batch),
            Preprocess::Standardize => standardize(batch),
        };
        if !report.is_clean() {
            log::warn!(
                "{} x and {} y samples had no contrast and were zeroed",
                report.degenerate_x.len(),
                report.degenerate_y.len()
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// PCA-whiten after preprocessing, keeping this fraction of variance.
    /// Models then train on the components; filters are exported in pixel space.
    #[serde(default)]
    pub whiten: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gae,
    Grbm,
    Isa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub factors: usize,
    /// Mapping units; for ISA this is derived from `factors / subspace_size`.
    #[serde(default)]
    pub mapping_units: usize,
    /// GAE: share `Wx` and `Wy`. ISA: learn from `x` alone.
    #[serde(default)]
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub isa: IsaConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub factors: Option<usize>,
    pub mapping_units: Option<usize>,
    pub set: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Sets a dotted key (`train.learning_rate`) in a JSON document. The value
/// is parsed as JSON and falls back to a plain string.
pub fn set_path(doc: &mut serde_json::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("expected key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("{key}: {part:?} is not inside an object")))?;
        if n + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(config_err(format!("empty key in {assignment:?}")))
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let mut doc: serde_json::Value = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for s in &overrides.set {
            set_path(&mut doc, s)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| config_err(e.to_string()))?;
        if let Some(v) = overrides.seed {
            cfg.seed = v;
        }
        if let Some(v) = &overrides.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = overrides.epochs {
            cfg.train.epochs = v;
            cfg.isa.epochs = v;
        }
        if let Some(v) = overrides.learning_rate {
            cfg.train.learning_rate = v;
            cfg.isa.learning_rate = v;
        }
        if let Some(v) = overrides.batch_size {
            cfg.train.batch_size = v;
            cfg.isa.batch_size = v;
        }
        if let Some(v) = overrides.factors {
            cfg.model.factors = v;
        }
        if let Some(v) = overrides.mapping_units {
            cfg.model.mapping_units = v;
        }
        // the experiment seed drives model initialization and minibatch order
        cfg.train.seed = cfg.seed;
        cfg.isa.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        if m.factors == 0 {
            return Err(config_err("model.factors must be positive"));
        }
        match m.kind {
            ModelKind::Gae | ModelKind::Grbm if m.mapping_units == 0 => {
                return Err(config_err("model.mapping_units must be positive"));
            }
            ModelKind::Grbm if m.tied => return Err(config_err("the gated Boltzmann machine has no tied variant")),
            ModelKind::Isa => {
                self.isa.validate().map_err(|e| config_err(e.to_string()))?;
                if m.factors % self.isa.subspace_size != 0 {
                    return Err(config_err(format!(
                        "{} factors do not split into subspaces of {}",
                        m.factors, self.isa.subspace_size
                    )));
                }
            }
            _ => {}
        }
        if let Some(keep) = self.dataset.whiten {
            if !(keep > 0.0 && keep <= 1.0) {
                return Err(config_err("dataset.whiten must lie in (0, 1]"));
            }
            if m.kind == ModelKind::Grbm {
                return Err(config_err("the gated Boltzmann machine needs binary pixels, not whitened components"));
            }
        }
        self.train.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    /// Checks model dimensions against a dataset's input sizes.
    pub fn check_dims(&self, x_dim: usize, y_dim: usize) -> Result<(), CliError> {
        let m = &self.model;
        if m.tied && m.kind == ModelKind::Gae && x_dim != y_dim {
            return Err(config_err(format!("tied model needs equal input sizes, dataset has {x_dim} and {y_dim}")));
        }
        if m.kind == ModelKind::Isa {
            let dim = if m.tied { x_dim } else { x_dim + y_dim };
            if m.factors > dim {
                return Err(config_err(format!(
                    "{} orthonormal filters do not fit in {dim} input dimensions",
                    m.factors
                )));
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.output_dir.join("dataset.relb")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "seed": 3,
        "output_dir": "out",
        "dataset": {"generator": "shifts1d", "num_pairs": 10, "length": 13,
                    "dot_density": 0.3, "max_shift": 3, "seed": 1},
        "model": {"kind": "gae", "factors": 26, "mapping_units": 5}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(BASE, &Overrides::default()).unwrap();
        assert_eq!(cfg.dataset.preprocess, Preprocess::Standardize);
        assert_eq!(cfg.train.seed, 3);
        assert!(!cfg.model.tied);
    }

    #[test]
    fn command_line_wins() {
        let o = Overrides {
            epochs: Some(4),
            set: vec!["train.momentum=0.5".into(), "model.tied=true".into()],
            ..Default::default()
        };
        let cfg = ExperimentConfig::parse(BASE, &o).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.momentum, 0.5);
        assert!(cfg.model.tied);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = BASE.replace("\"seed\": 3,", "");
        assert!(matches!(ExperimentConfig::parse(&text, &Overrides::default()), Err(CliError::Config(_))));
    }

    #[test]
    fn bad_assignment_is_a_config_error() {
        let mut doc = serde_json::json!({"a": 1});
        assert!(set_path(&mut doc, "a.b=2").is_err());
        assert!(set_path(&mut doc, "novalue").is_err());
        set_path(&mut doc, "c.d=x").unwrap();
        assert_eq!(doc["c"]["d"], "x");
    }
}
