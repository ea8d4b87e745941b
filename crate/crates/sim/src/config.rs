//! Experiment configuration files.

use std::path::{Path, PathBuf};

use gfpl_core::data::{PartitionSpec, SyntheticSpec};
use gfpl_core::federation::FederationConfig;
use gfpl_core::model::ModelShape;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Where the samples come from. Exactly one source must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSource>,
}

/// An IDX image file and its label file. Relative paths resolve against
/// the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Network layout; input width and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Defaults to `feature_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
}

impl ModelConfig {
    pub fn shape(&self, input_dim: usize, classes: usize) -> ModelShape {
        ModelShape {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            projection_dim: self.projection_dim,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Threads used for per-client work; 0 picks the number of CPUs.
    pub client_workers: usize,
    /// Run sweep points concurrently instead of one after another.
    pub concurrent_sweep: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            client_workers: 1,
            concurrent_sweep: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds dataset generation, partitioning, the ETF and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))
    }

    /// Reads a configuration file and resolves relative IDX paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(idx) = cfg.dataset.as_mut().and_then(|d| d.idx.as_mut()) {
            idx.images = base.join(&idx.images);
            idx.labels = base.join(&idx.labels);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SimError::Parse(e.to_string()))
    }

    /// Pushes the top-level seed into the nested blocks and checks every
    /// invariant that does not need the dataset.
    pub fn resolve(mut self) -> Result<Self> {
        self.partition.seed = self.seed;
        self.federation.seed = self.seed;
        let dataset = self.dataset.as_ref().ok_or_else(|| SimError::config("dataset", "missing dataset block"))?;
        match (&dataset.synthetic, &dataset.idx) {
            (Some(_), Some(_)) => {
                return Err(SimError::config("dataset", "set exactly one of `synthetic` and `idx`, not both"))
            }
            (None, None) => return Err(SimError::config("dataset", "set one of `synthetic` or `idx`")),
            _ => {}
        }
        if self.model.feature_dim == 0 {
            return Err(SimError::config("model.feature_dim", "must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(SimError::config("model.hidden", "layer widths must be at least 1"));
        }
        self.federation.validate()?;
        if self.runtime.client_workers > 1024 {
            return Err(SimError::config("runtime.client_workers", "at most 1024"));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seed = 3
        [dataset.synthetic]
        classes = 4
        input_dim = 5
        per_class = 20
        spread = 0.3
        [partition]
        clients = 2
        way_mean = 2
        shot_mean = 8
        [model]
        hidden = [8]
        feature_dim = 6
    "#;

    #[test]
    fn parses_with_defaults_and_resolves_seeds() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap().resolve().unwrap();
        assert_eq!(cfg.federation.rounds, 100);
        assert_eq!(cfg.federation.pseudo_per_class, 16);
        assert_eq!(cfg.partition.seed, 3);
        assert_eq!(cfg.federation.seed, 3);
        assert_eq!(cfg.partition.test_fraction, 0.2);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let text = BASE.replace("spread = 0.3", "spread = 0.3\nsprd = 1");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("sprd"), "{err}");
        let text = format!("{BASE}\n[federation]\nrouns = 3\n");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("rouns"));
    }

    #[test]
    fn missing_dataset_names_the_field() {
        let text = BASE.replace("[dataset.synthetic]", "[unused]").replace("classes = 4\n", "");
        let text: String = text
            .lines()
            .filter(|l| !["[unused]", "input_dim", "per_class", "spread"].iter().any(|k| l.trim().starts_with(k)))
            .collect::<Vec<_>>()
            .join("\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert!(matches!(&err, SimError::Config { path, .. } if path == "dataset"), "{err}");
    }

    #[test]
    fn both_sources_rejected() {
        let text = format!("{BASE}\n[dataset.idx]\nimages = \"a\"\nlabels = \"b\"\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("dataset"));
    }

    #[test]
    fn nested_validation_reports_path() {
        let text = format!("{BASE}\n[federation]\nretrain_interval = 0\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap_err().to_string();
        assert!(err.contains("federation.retrain_interval"), "{err}");
        let text = format!("{BASE}\n[federation.train]\nmomentum = 1.5\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().resolve().unwrap_err().to_string();
        assert!(err.contains("federation.train") && err.contains("momentum"), "{err}");
    }

    #[test]
    fn snapshot_roundtrips() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap().resolve().unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap().resolve().unwrap();
        assert_eq!(cfg, again);
    }
}
