//! Experiment configuration files (TOML).
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected and the error names the key.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use stfit::evaluation::NodeScope;
use stfit::graph_data::{load_dataset, synth_generate, GraphKind, SynthConfig};
use stfit::{SpatialTemporalGraph, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Dataset directory; required when `kind = "directory"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub graph: GraphKind,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            nodes: 30,
            steps: 480,
            seed: 0,
            noise_std: 0.05,
            graph: GraphKind::RandomGeometric,
        }
    }
}

impl DatasetConfig {
    /// `synthetic` or a dataset directory.
    pub fn from_flag(flag: &str, base: &DatasetConfig) -> Self {
        if flag == "synthetic" {
            DatasetConfig {
                kind: DatasetKind::Synthetic,
                path: None,
                ..base.clone()
            }
        } else {
            DatasetConfig {
                kind: DatasetKind::Directory,
                path: Some(PathBuf::from(flag)),
                ..base.clone()
            }
        }
    }

    /// Name used in experiment ids and reports.
    pub fn label(&self) -> String {
        match self.kind {
            DatasetKind::Synthetic => format!("synthetic-n{}-t{}-s{}", self.nodes, self.steps, self.seed),
            DatasetKind::Directory => self
                .path
                .as_deref()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
        }
    }

    pub fn load(&self) -> Result<SpatialTemporalGraph, CliError> {
        match self.kind {
            DatasetKind::Synthetic => {
                let cfg = SynthConfig {
                    noise_std: self.noise_std,
                    graph: self.graph,
                    ..SynthConfig::new(self.nodes, self.steps, self.seed)
                };
                synth_generate(&cfg).map_err(CliError::from)
            }
            DatasetKind::Directory => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::validation("dataset.path is required when dataset.kind = \"directory\""))?;
                load_dataset(path).map_err(CliError::from)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds used by `ablate` and `sweep`; `train` uses `train.seed`.
    pub seeds: Vec<u64>,
    pub node_scope: NodeScope,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            node_scope: NodeScope::TestNodes,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::validation(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read configuration {}", path.display()))
            .map_err(CliError::Validation)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::validation("seeds must not be empty"));
        }
        if self.dataset.kind == DatasetKind::Directory && self.dataset.path.is_none() {
            return Err(CliError::validation("dataset.path is required when dataset.kind = \"directory\""));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = ExperimentConfig::parse("[train.model]\nhidden = 3\n").unwrap_err();
        assert!(err.to_string().contains("hidden"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let text = "seeds = [4]\n[train]\nlr = 0.003\nnum_virtual = 5\nadjacency = \"identity\"\n[train.model]\nhidden_dim = 16\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.num_virtual, Some(5));
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_toml(), cfg.to_toml());
    }

    #[test]
    fn invalid_values_are_validation_errors() {
        assert!(matches!(
            ExperimentConfig::parse("[train]\nratio = 1.5\n").unwrap_err(),
            CliError::Validation(_)
        ));
        assert!(ExperimentConfig::parse("seeds = []\n").is_err());
        assert!(ExperimentConfig::parse("[dataset]\nkind = \"directory\"\n").is_err());
    }
}
