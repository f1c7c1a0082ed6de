//! Versioned JSON checkpoints.
//!
//! A checkpoint carries everything needed to resume training bit-exactly or
//! to run inference: both parameter sets, optimizer moments, the run
//! configuration, the node split, normalisation statistics and the positions
//! of all random streams. Floats are written with round-trip precision.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::graph_data::{NodeSplit, NormStats, TemporalSplit};
use crate::nn::{Adam, NamedTensor};
use crate::trainer::{stream_rng, Model, RngStates, TrainConfig, Trainer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub backbone_kind: BackboneKind,
    pub backbone_config: BackboneConfig,
    pub train_config: TrainConfig,
    pub split: NodeSplit,
    pub temporal: TemporalSplit,
    pub norm: NormStats,
    pub aug_params: Vec<NamedTensor>,
    pub gf_params: Vec<NamedTensor>,
    pub aug_optimizer: Adam,
    pub gf_optimizer: Adam,
    pub rng: RngStates,
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub best_val_mae: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_aug_params: Option<Vec<NamedTensor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_gf_params: Option<Vec<NamedTensor>>,
}

impl Checkpoint {
    /// Snapshot the trainer's live state.
    pub fn from_trainer(t: &Trainer) -> Self {
        let best = t.best_params();
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            backbone_kind: t.config.backbone,
            backbone_config: t.config.model.clone(),
            train_config: t.config.clone(),
            split: t.split.clone(),
            temporal: t.temporal.clone(),
            norm: t.norm.clone(),
            aug_params: t.model.aug.to_records(),
            gf_params: t.model.gf.to_records(),
            aug_optimizer: t.aug_opt.clone(),
            gf_optimizer: t.gf_opt.clone(),
            rng: t.rngs.states(),
            epoch: t.epoch,
            val_history: t.val_history.clone(),
            best_val_mae: t.best_val_mae.is_finite().then_some(t.best_val_mae),
            best_epoch: t.best_epoch,
            epochs_since_improvement: t.epochs_since_improvement,
            phase1_steps: t.phase1_steps,
            phase2_steps: t.phase2_steps,
            best_aug_params: best.map(|(a, _)| a.to_records()),
            best_gf_params: best.map(|(_, g)| g.to_records()),
        }
    }

    /// Rebuild the modules with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let cfg = &self.train_config;
        let mut model = Model::build(cfg, &mut stream_rng(cfg.seed, 0))?;
        model.aug.load_records(&self.aug_params)?;
        model.gf.load_records(&self.gf_params)?;
        Ok(model)
    }

    /// Modules carrying the best-validation parameters when recorded,
    /// otherwise the live ones.
    pub fn inference_model(&self) -> Result<Model> {
        let mut model = self.model()?;
        if let (Some(a), Some(g)) = (&self.best_aug_params, &self.best_gf_params) {
            model.aug.load_records(a)?;
            model.gf.load_records(g)?;
        }
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.backbone_kind != self.train_config.backbone || self.backbone_config != self.train_config.model {
            return Err(Error::Checkpoint(
                "backbone record disagrees with the training configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ckpt.check()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_data::{split_nodes_bfs, synth_generate, SynthConfig};

    fn config() -> TrainConfig {
        TrainConfig {
            max_epochs: 4,
            patience: 4,
            batch_size: 4,
            latent_dim: 3,
            aug_hidden: 4,
            topology_hidden: 4,
            topology_dim: 3,
            ratio: 0.5,
            max_batches_per_epoch: Some(2),
            model: BackboneConfig {
                hidden_dim: 4,
                input_steps: 9,
                output_steps: 2,
                ..BackboneConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn resuming_reproduces_uninterrupted_training() {
        let graph = synth_generate(&SynthConfig::new(6, 100, 2)).unwrap();
        let split = split_nodes_bfs(graph.adjacency.as_ref(), 6, 0.5, 0).unwrap();

        let mut straight = Trainer::new(config(), &graph, split.clone()).unwrap();
        let mut expected = Vec::new();
        for _ in 0..3 {
            expected.push(straight.run_epoch().unwrap());
        }

        let mut first = Trainer::new(config(), &graph, split).unwrap();
        let mut got = vec![first.run_epoch().unwrap()];
        let json = Checkpoint::from_trainer(&first).to_json().unwrap();
        let ckpt = Checkpoint::from_json(&json).unwrap();
        let mut resumed = Trainer::resume(&ckpt, &graph).unwrap();
        got.push(resumed.run_epoch().unwrap());
        got.push(resumed.run_epoch().unwrap());

        for (a, b) in expected.iter_mut().zip(got.iter_mut()) {
            a.wall_seconds = 0.0;
            b.wall_seconds = 0.0;
        }
        assert_eq!(expected, got);
        assert_eq!(straight.model.gf, resumed.model.gf);
    }

    #[test]
    fn round_trip_is_exact_and_versioned() {
        let graph = synth_generate(&SynthConfig::new(6, 100, 3)).unwrap();
        let split = split_nodes_bfs(graph.adjacency.as_ref(), 6, 0.5, 1).unwrap();
        let mut t = Trainer::new(config(), &graph, split).unwrap();
        t.run_epoch().unwrap();
        let ckpt = Checkpoint::from_trainer(&t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(back.model().unwrap().gf, t.model.gf);

        let mut old = ckpt.clone();
        old.schema_version = 99;
        assert!(Checkpoint::from_json(&old.to_json().unwrap()).is_err());
        assert!(Checkpoint::load(dir.path().join("missing.json")).is_err());
    }
}
