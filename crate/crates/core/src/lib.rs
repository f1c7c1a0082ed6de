//! Inductive spatio-temporal forecasting with limited training data.
//!
//! The crate trains a forecasting backbone on the series of a small subset
//! of sensor nodes and forecasts for nodes it never saw. Three learned
//! pieces cooperate:
//!
//! - [`temporal_aug`]: a VAE whose latent codes of real windows are mixed
//!   to synthesise new "virtual node" series;
//! - [`topology`]: an MLP scorer plus Gumbel-Softmax sampler producing a
//!   sparse adjacency over whatever node set is present;
//! - [`trainer`]: alternating updates of the augmentation parameters and of
//!   the backbone + topology parameters.
//!
//! [`graph_data`] handles ingestion and splits, [`backbone`] holds the
//! forecasting networks and [`evaluation`] the masked metrics, inference and
//! ablation runner.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod graph_data;
pub mod nn;
pub mod temporal_aug;
pub mod topology;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, BackboneKind};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use evaluation::{MetricsReport, Variant};
pub use graph_data::{NodeSplit, NormStats, SpatialTemporalGraph, TemporalSplit, WindowSample};
pub use trainer::{EpochRecord, TrainConfig, Trainer};
