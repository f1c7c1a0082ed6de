//! Two-phase alternating optimisation.
//!
//! Parameters live in two disjoint stores: `θ^aug` (the VAE) and `θ^gf` (the
//! backbone plus the topology learner). Phase 1 minimises
//! `L_aug = L_sim + L_fst + L_KL` with respect to `θ^aug` only; phase 2
//! minimises `L_gf = L_fst + L_ori` with respect to `θ^gf` only. The frozen
//! store is recorded on the tape as constants, so the other set cannot move.
//!
//! The trainer only ever holds features of training nodes up to the end of
//! the validation range; test nodes are invisible to every training step.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::{build_backbone, Backbone, BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::graph_data::{temporal_split, zscore_fit, NodeSplit, NormStats, SpatialTemporalGraph, TemporalSplit};
use crate::nn::{clip_global_norm, Adam, Bound, ParamStore};
use crate::temporal_aug::{
    check_lambda, loss_fst, loss_kl, loss_reconstruction, loss_sim, sample_pairs, standard_normal, MixPair, Vae,
};
use crate::topology::{init_adjacency_cosine, GumbelNoise, SamplerConfig, SparsifyVariant, TopologyLearner};

/// Stream ids of the per-purpose generators derived from the run seed.
const DATA_STREAM: u64 = 1;
const GUMBEL_STREAM: u64 = 2;
const VAE_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const FALLBACK_GRAPH_STREAM: u64 = 5;
/// Evaluation noise for window `k` uses stream `EVAL_STREAM_BASE + k`.
const EVAL_STREAM_BASE: u64 = 1 << 32;

/// Forecasting loss on real nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

/// When the two phases alternate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    /// A full phase-1 sweep over the epoch's batches, then a full phase-2 sweep.
    #[default]
    PerEpoch,
    /// Phase 1 then phase 2 on each batch.
    PerBatch,
}

/// Where the backbone's adjacency comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyMode {
    /// Sampled from the topology learner.
    #[default]
    Learned,
    /// The dataset graph over the nodes present; virtual nodes are isolated.
    Dataset,
    /// All ones minus the diagonal.
    Full,
    /// The identity matrix.
    Identity,
}

impl fmt::Display for AdjacencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyMode::Learned => "learned",
            AdjacencyMode::Dataset => "dataset",
            AdjacencyMode::Full => "full",
            AdjacencyMode::Identity => "identity",
        })
    }
}

impl FromStr for AdjacencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(AdjacencyMode::Learned),
            "dataset" => Ok(AdjacencyMode::Dataset),
            "full" => Ok(AdjacencyMode::Full),
            "identity" => Ok(AdjacencyMode::Identity),
            other => Err(Error::Config(format!(
                "unknown adjacency mode {other:?}; expected learned, dataset, full or identity"
            ))),
        }
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Mix-up ratio `λ`.
    pub lambda: f64,
    /// Sparsification threshold `ε`.
    pub epsilon: f64,
    /// Sparsification temperature `φ`.
    pub phi: f64,
    /// Gumbel-Softmax temperature `s`.
    pub temperature: f64,
    /// Virtual nodes per anchor; the number of training nodes when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_virtual: Option<usize>,
    pub seed: u64,
    /// Seed of the topology samples drawn for validation and inference.
    pub eval_seed: u64,
    pub optimizer: String,
    pub loss_ori: LossKind,
    pub sparsify_variant: SparsifyVariant,
    pub hard_sampling: bool,
    pub symmetrize: bool,
    pub alternation: Alternation,
    pub use_augmentation: bool,
    pub use_similarity: bool,
    pub use_forecastability: bool,
    pub adjacency: AdjacencyMode,
    /// Add a VAE reconstruction term to phase 1.
    pub reconstruction_loss: bool,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub latent_dim: usize,
    pub aug_hidden: usize,
    pub topology_hidden: usize,
    pub topology_dim: usize,
    /// Cosine threshold for the fallback graph of datasets without one.
    pub init_threshold: f64,
    /// Fraction of nodes whose series are visible in training.
    pub ratio: f64,
    pub temporal_fractions: [f64; 3],
    /// Cap on batches per epoch (all batches when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_batches_per_epoch: Option<usize>,
    /// Topology samples averaged per window at inference.
    pub inference_samples: usize,
    pub backbone: BackboneKind,
    pub model: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-2,
            weight_decay: 1e-3,
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            lambda: 0.5,
            epsilon: 0.9,
            phi: 0.1,
            temperature: 0.5,
            num_virtual: None,
            seed: 0,
            eval_seed: 0,
            optimizer: "adam".into(),
            loss_ori: LossKind::Mae,
            sparsify_variant: SparsifyVariant::SoftThreshold,
            hard_sampling: true,
            symmetrize: false,
            alternation: Alternation::PerEpoch,
            use_augmentation: true,
            use_similarity: true,
            use_forecastability: true,
            adjacency: AdjacencyMode::Learned,
            reconstruction_loss: false,
            clip_norm: 5.0,
            latent_dim: 64,
            aug_hidden: 64,
            topology_hidden: 64,
            topology_dim: 64,
            init_threshold: 0.7,
            ratio: 0.1,
            temporal_fractions: [0.7, 0.2, 0.1],
            max_batches_per_epoch: None,
            inference_samples: 1,
            backbone: BackboneKind::Stgcn,
            model: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("phi", self.phi),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.optimizer != "adam" {
            return Err(Error::Config(format!(
                "unknown optimizer {:?}; only \"adam\" is supported",
                self.optimizer
            )));
        }
        check_lambda(self.lambda)?;
        self.sampler().validate()?;
        if self.num_virtual == Some(0) {
            return Err(Error::Config("num_virtual must be at least 1".into()));
        }
        if [self.latent_dim, self.aug_hidden, self.topology_hidden, self.topology_dim, self.inference_samples]
            .contains(&0)
        {
            return Err(Error::Config(
                "latent_dim, aug_hidden, topology_hidden, topology_dim and inference_samples must be positive"
                    .into(),
            ));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("max_batches_per_epoch must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        self.model.validate()
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            epsilon: self.epsilon,
            phi: self.phi,
            temperature: self.temperature,
            variant: self.sparsify_variant,
            hard: self.hard_sampling,
            symmetrize: self.symmetrize,
        }
    }

    pub fn window_len(&self) -> usize {
        self.model.input_steps + self.model.output_steps
    }

    /// Whether phase 2 includes the forecastability term.
    pub fn fst_in_phase2(&self) -> bool {
        self.use_augmentation && self.use_forecastability
    }
}

/// Averages of one epoch.
///
/// `l_fst` and `l_gf` come from phase 2, so `l_gf = l_fst + l_ori`;
/// `l_fst_aug` is phase 1's forecastability term, so
/// `l_aug = l_sim + l_fst_aug + l_kl` (plus `l_recon` when enabled).
/// `l_sim` is the negated similarity that phase 1 minimises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_sim: f64,
    pub l_fst: f64,
    pub l_kl: f64,
    pub l_aug: f64,
    pub l_ori: f64,
    pub l_gf: f64,
    pub l_fst_aug: f64,
    #[serde(default)]
    pub l_recon: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
}

/// Phase-1 loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugTerms {
    pub sim: f64,
    pub fst: f64,
    pub kl: f64,
    pub recon: f64,
    pub total: f64,
}

/// Phase-2 loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GfTerms {
    pub fst: f64,
    pub ori: f64,
    pub total: f64,
}

/// Serializable position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// The four generators of a run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub gumbel: ChaCha8Rng,
    pub vae: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStates {
    pub data: RngState,
    pub gumbel: RngState,
    pub vae: RngState,
    pub init: RngState,
}

/// Generator for `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            data: stream_rng(seed, DATA_STREAM),
            gumbel: stream_rng(seed, GUMBEL_STREAM),
            vae: stream_rng(seed, VAE_STREAM),
            init: stream_rng(seed, INIT_STREAM),
        }
    }

    pub fn states(&self) -> RngStates {
        RngStates {
            data: RngState::capture(&self.data),
            gumbel: RngState::capture(&self.gumbel),
            vae: RngState::capture(&self.vae),
            init: RngState::capture(&self.init),
        }
    }

    pub fn restore(states: &RngStates) -> Self {
        RngStreams {
            data: states.data.restore(),
            gumbel: states.gumbel.restore(),
            vae: states.vae.restore(),
            init: states.init.restore(),
        }
    }
}

/// Gumbel noise for evaluation window `index`, independent of training state.
pub fn eval_noise(eval_seed: u64, index: u64, shape: &[usize]) -> GumbelNoise {
    GumbelNoise::sample(shape, &mut stream_rng(eval_seed, EVAL_STREAM_BASE + index))
}

/// Adjacency for datasets that ship without one: thresholded cosine
/// similarity of random representations, seeded by the run seed.
pub fn fallback_adjacency(num_nodes: usize, seed: u64, threshold: f64, dim: usize) -> Array2<f64> {
    init_adjacency_cosine(num_nodes, dim, threshold, &mut stream_rng(seed, FALLBACK_GRAPH_STREAM))
}

/// `early_stop(history, patience)`: true iff more than `patience` epochs
/// have been recorded and none of the last `patience` improved on the best
/// value seen before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    history[split..].iter().all(|&v| !(v < best))
}

/// The learnable modules and their parameter stores.
pub struct Model {
    pub backbone: Box<dyn Backbone>,
    pub vae: Vae,
    pub topology: TopologyLearner,
    /// `θ^aug`
    pub aug: ParamStore,
    /// `θ^gf`
    pub gf: ParamStore,
}

impl Model {
    /// Register all parameters. Names are prefixed `aug.` or `gf.`.
    pub fn build(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = &config.model;
        let mut gf = ParamStore::new();
        let mut aug = ParamStore::new();
        let backbone = build_backbone(config.backbone, m, &mut gf, "gf.backbone", rng)?;
        let topology = TopologyLearner::new(
            &mut gf,
            "gf.topology",
            m.input_steps,
            m.channels,
            config.topology_hidden,
            config.topology_dim,
            rng,
        );
        let vae = Vae::new(
            &mut aug,
            "aug.vae",
            m.input_steps + m.output_steps,
            m.channels,
            config.aug_hidden,
            config.latent_dim,
            rng,
        );
        Ok(Model {
            backbone,
            vae,
            topology,
            aug,
            gf,
        })
    }

    /// Forecaster over a node set whose static graph (if any) is `adjacency`.
    pub fn forecaster<'a>(&'a self, config: &TrainConfig, adjacency: Option<&'a Array2<f64>>) -> Forecaster<'a> {
        Forecaster {
            backbone: self.backbone.as_ref(),
            topology: &self.topology,
            params: &self.gf,
            sampler: config.sampler(),
            mode: config.adjacency,
            static_adjacency: adjacency,
        }
    }
}

/// Static adjacency of `m` nodes for the non-learned modes. In dataset mode
/// the first `known.nrows()` nodes take `known` and the rest are isolated.
pub fn static_adjacency(mode: AdjacencyMode, m: usize, known: Option<&Array2<f64>>) -> Result<Option<Array2<f64>>> {
    Ok(match mode {
        AdjacencyMode::Learned => None,
        AdjacencyMode::Full => Some(Array2::from_shape_fn((m, m), |(i, j)| if i == j { 0.0 } else { 1.0 })),
        AdjacencyMode::Identity => Some(Array2::eye(m)),
        AdjacencyMode::Dataset => {
            let a = known.ok_or_else(|| Error::Config("dataset adjacency mode needs a graph".into()))?;
            let n = a.nrows();
            if n > m {
                return Err(Error::Shape(format!("graph of {n} nodes padded to {m}")));
            }
            let mut out = Array2::zeros((m, m));
            out.slice_mut(s![..n, ..n]).assign(a);
            Some(out)
        }
    })
}

/// Frozen backbone plus adjacency source, used for validation and inference.
pub struct Forecaster<'a> {
    pub backbone: &'a dyn Backbone,
    pub topology: &'a TopologyLearner,
    pub params: &'a ParamStore,
    pub sampler: SamplerConfig,
    pub mode: AdjacencyMode,
    /// Graph over exactly the nodes being forecast (dataset mode).
    pub static_adjacency: Option<&'a Array2<f64>>,
}

impl Forecaster<'_> {
    /// Normalised inputs `[B, κ, M, C]` → normalised forecasts `[B, τ, M, C]`.
    /// `noise` is `[B, M, M]` and only used in learned mode.
    pub fn predict(&self, inputs: &Tensor, noise: &GumbelNoise) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let x = g.constant(inputs.clone());
        let m = inputs.shape()[2];
        let adj = match self.mode {
            AdjacencyMode::Learned => self.topology.topology(&p, x, &self.sampler, noise)?.adjacency,
            mode => {
                let a = static_adjacency(mode, m, self.static_adjacency)?.expect("static mode");
                g.constant(a.into_dyn())
            }
        };
        let out = self.backbone.forward(&p, x, adj)?;
        let value = out.value().clone();
        Ok(value)
    }
}

/// Normalised tensors for one batch of anchors over the training nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, κ, N_train, C]`
    pub inputs: Tensor,
    /// `[B, τ, N_train, C]`
    pub targets: Tensor,
    /// `[B, N_train, (κ+τ)·C]`
    pub windows: Tensor,
}

/// Random draws consumed by one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub pairs: Vec<MixPair>,
    /// `[B, N_train, d]`
    pub latent: Tensor,
    /// `[B, N_train, N_train]`
    pub gumbel_real: GumbelNoise,
    /// `[B, N_train + K, N_train + K]`
    pub gumbel_ext: GumbelNoise,
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

/// Mutable training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub aug_opt: Adam,
    pub gf_opt: Adam,
    pub rngs: RngStreams,
    pub split: NodeSplit,
    pub temporal: TemporalSplit,
    pub norm: NormStats,
    /// Completed epochs.
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    best_params: Option<(ParamStore, ParamStore)>,
    /// Normalised training-node features over `[0, val.end)`: `[T', N_train, C]`.
    features: Array3<f64>,
    /// Dataset graph restricted to the training nodes.
    train_adjacency: Option<Array2<f64>>,
}

impl Trainer {
    /// Prepare a run. Only training-node columns up to the end of the
    /// validation range are retained.
    pub fn new(config: TrainConfig, graph: &SpatialTemporalGraph, split: NodeSplit) -> Result<Self> {
        config.validate()?;
        let mut rngs = RngStreams::new(config.seed);
        let model = Model::build(&config, &mut rngs.init)?;
        Self::assemble(config, graph, split, model, rngs)
    }

    fn assemble(
        config: TrainConfig,
        graph: &SpatialTemporalGraph,
        split: NodeSplit,
        model: Model,
        rngs: RngStreams,
    ) -> Result<Self> {
        if graph.num_channels() != config.model.channels {
            return Err(Error::Shape(format!(
                "dataset has {} channels, model expects {}",
                graph.num_channels(),
                config.model.channels
            )));
        }
        if split.train_nodes.len() < 2 && config.use_augmentation {
            return Err(Error::Config(format!(
                "augmentation needs at least 2 training nodes, split has {}",
                split.train_nodes.len()
            )));
        }
        if split.train_nodes.iter().any(|&v| v >= graph.num_nodes) {
            return Err(Error::Shape("training node outside the graph".into()));
        }
        let [a, b, c] = config.temporal_fractions;
        let temporal = temporal_split(graph.num_steps(), (a, b, c), config.window_len())?;
        let span = config.window_len();
        if temporal.train.len() < span || temporal.val.len() < span {
            return Err(Error::Empty(format!(
                "training range {:?} and validation range {:?} must each hold a {span}-step window",
                temporal.train, temporal.val
            )));
        }
        let norm = zscore_fit(&graph.features, &split.train_nodes, temporal.train.clone())?;
        let visible = graph
            .features
            .slice(s![..temporal.val.end, .., ..])
            .select(Axis(1), &split.train_nodes);
        let features = norm
            .apply(&visible.into_dyn())?
            .into_dimensionality()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let full_graph = match &graph.adjacency {
            Some(a) => a.clone(),
            None => fallback_adjacency(graph.num_nodes, config.seed, config.init_threshold, config.topology_dim),
        };
        let train_adjacency = Some(
            full_graph
                .select(Axis(0), &split.train_nodes)
                .select(Axis(1), &split.train_nodes),
        );
        let aug_opt = Adam::new(&model.aug, config.lr, config.weight_decay);
        let gf_opt = Adam::new(&model.gf, config.lr, config.weight_decay);
        Ok(Trainer {
            config,
            model,
            aug_opt,
            gf_opt,
            rngs,
            split,
            temporal,
            norm,
            epoch: 0,
            val_history: Vec::new(),
            best_val_mae: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            phase1_steps: 0,
            phase2_steps: 0,
            best_params: None,
            features,
            train_adjacency,
        })
    }

    /// Rebuild a trainer from a checkpoint so training resumes exactly.
    pub fn resume(checkpoint: &crate::checkpoint::Checkpoint, graph: &SpatialTemporalGraph) -> Result<Self> {
        let config = checkpoint.train_config.clone();
        config.validate()?;
        let mut model = Model::build(&config, &mut stream_rng(config.seed, INIT_STREAM))?;
        model.aug.load_records(&checkpoint.aug_params)?;
        model.gf.load_records(&checkpoint.gf_params)?;
        let rngs = RngStreams::restore(&checkpoint.rng);
        let mut t = Self::assemble(config, graph, checkpoint.split.clone(), model, rngs)?;
        if t.norm != checkpoint.norm || t.temporal != checkpoint.temporal {
            return Err(Error::Checkpoint(
                "dataset does not reproduce the checkpoint's normalisation or split".into(),
            ));
        }
        t.aug_opt = checkpoint.aug_optimizer.clone();
        t.gf_opt = checkpoint.gf_optimizer.clone();
        t.epoch = checkpoint.epoch;
        t.val_history = checkpoint.val_history.clone();
        t.best_val_mae = checkpoint.best_val_mae.unwrap_or(f64::INFINITY);
        t.best_epoch = checkpoint.best_epoch;
        t.epochs_since_improvement = checkpoint.epochs_since_improvement;
        t.phase1_steps = checkpoint.phase1_steps;
        t.phase2_steps = checkpoint.phase2_steps;
        if let (Some(a), Some(g)) = (&checkpoint.best_aug_params, &checkpoint.best_gf_params) {
            let mut ba = t.model.aug.clone();
            let mut bg = t.model.gf.clone();
            ba.load_records(a)?;
            bg.load_records(g)?;
            t.best_params = Some((ba, bg));
        }
        Ok(t)
    }

    pub fn num_train_nodes(&self) -> usize {
        self.split.train_nodes.len()
    }

    /// Virtual nodes per anchor.
    pub fn num_virtual(&self) -> usize {
        self.config.num_virtual.unwrap_or(self.num_train_nodes())
    }

    /// Training-range window starts.
    pub fn train_starts(&self) -> Range<usize> {
        0..self.temporal.train.len() - self.config.window_len() + 1
    }

    /// Validation-range window starts.
    pub fn val_starts(&self) -> Range<usize> {
        let first = self.temporal.val.start;
        first..self.temporal.val.end - self.config.window_len() + 1
    }

    /// The training-node features the trainer holds (normalised).
    pub fn visible_features(&self) -> &Array3<f64> {
        &self.features
    }

    pub fn train_adjacency(&self) -> Option<&Array2<f64>> {
        self.train_adjacency.as_ref()
    }

    /// Assemble the batch whose windows start at `starts`.
    pub fn batch(&self, starts: &[usize]) -> Batch {
        let m = &self.config.model;
        let (kappa, tau, c) = (m.input_steps, m.output_steps, m.channels);
        let n = self.num_train_nodes();
        let b = starts.len();
        let span = kappa + tau;
        let mut inputs = Tensor::zeros(IxDyn(&[b, kappa, n, c]));
        let mut targets = Tensor::zeros(IxDyn(&[b, tau, n, c]));
        let mut windows = Tensor::zeros(IxDyn(&[b, n, span * c]));
        for (bi, &t0) in starts.iter().enumerate() {
            for l in 0..span {
                for v in 0..n {
                    for ch in 0..c {
                        let x = self.features[[t0 + l, v, ch]];
                        if l < kappa {
                            inputs[[bi, l, v, ch]] = x;
                        } else {
                            targets[[bi, l - kappa, v, ch]] = x;
                        }
                        windows[[bi, v, l * c + ch]] = x;
                    }
                }
            }
        }
        Batch {
            inputs,
            targets,
            windows,
        }
    }

    /// Draw the step's randomness: pairs and latent noise from the VAE
    /// stream, then Gumbel noise from the Gumbel stream.
    pub fn draw_noise(&mut self, batch_size: usize) -> Result<StepNoise> {
        let n = self.num_train_nodes();
        let k = self.num_virtual();
        let aug = self.config.use_augmentation;
        let (pairs, latent) = if aug {
            (
                sample_pairs(n, k, &mut self.rngs.vae)?,
                standard_normal(&[batch_size, n, self.config.latent_dim], &mut self.rngs.vae),
            )
        } else {
            (Vec::new(), Tensor::zeros(IxDyn(&[batch_size, n, self.config.latent_dim])))
        };
        let gumbel_real = GumbelNoise::sample(&[batch_size, n, n], &mut self.rngs.gumbel);
        let m = n + if aug { k } else { 0 };
        let gumbel_ext = GumbelNoise::sample(&[batch_size, m, m], &mut self.rngs.gumbel);
        Ok(StepNoise {
            pairs,
            latent,
            gumbel_real,
            gumbel_ext,
        })
    }

    fn adjacency_var<'g>(
        &self,
        gf: &Bound<'g>,
        inputs: Var<'g>,
        noise: &GumbelNoise,
    ) -> Result<Var<'g>> {
        let m = inputs.shape()[2];
        match self.config.adjacency {
            AdjacencyMode::Learned => Ok(self
                .model
                .topology
                .topology(gf, inputs, &self.config.sampler(), noise)?
                .adjacency),
            mode => {
                let a = static_adjacency(mode, m, self.train_adjacency.as_ref())?.expect("static mode");
                Ok(inputs.graph().constant(a.into_dyn()))
            }
        }
    }

    /// Phase-2 forecastability of generated series (shared by both phases).
    fn forecastability<'g>(
        &self,
        g: &'g Graph,
        aug: &Bound<'g>,
        gf: &Bound<'g>,
        batch: &Batch,
        noise: &StepNoise,
    ) -> Result<(Var<'g>, crate::temporal_aug::Generation<'g>)> {
        let kappa = self.config.model.input_steps;
        let gen = self.model.vae.generate(
            aug,
            g.constant(batch.windows.clone()),
            &noise.pairs,
            self.config.lambda,
            &noise.latent,
        )?;
        let series = self.model.vae.series_to_nodes(gen.series);
        let real = g.constant(batch.inputs.clone());
        let joint = g.concat(&[real, series.slice_axis(1, 0, kappa)], 2);
        let adj = self.adjacency_var(gf, joint, &noise.gumbel_ext)?;
        let fst = loss_fst(self.model.backbone.as_ref(), gf, series, Some(real), adj)?;
        Ok((fst, gen))
    }

    /// `L_aug` at `aug` (with the current `θ^gf` frozen) and its gradient.
    pub fn aug_loss(&self, aug: &ParamStore, batch: &Batch, noise: &StepNoise) -> Result<(AugTerms, Vec<Tensor>)> {
        let cfg = &self.config;
        let g = Graph::new();
        let pa = aug.bind(&g);
        let pg = self.model.gf.bind_frozen(&g);
        let (fst, gen) = if cfg.use_forecastability {
            let (f, gen) = self.forecastability(&g, &pa, &pg, batch, noise)?;
            (Some(f), gen)
        } else {
            let gen = self.model.vae.generate(
                &pa,
                g.constant(batch.windows.clone()),
                &noise.pairs,
                cfg.lambda,
                &noise.latent,
            )?;
            (None, gen)
        };
        let kl = loss_kl(gen.posterior);
        let sim = if cfg.use_similarity {
            let re = self.model.vae.encode(&pa, gen.series)?;
            Some(loss_sim(re.mu, gen.z_i, gen.z_j, cfg.lambda))
        } else {
            None
        };
        let recon = if cfg.reconstruction_loss {
            Some(loss_reconstruction(
                &self.model.vae,
                &pa,
                g.constant(batch.windows.clone()),
                gen.posterior,
            )?)
        } else {
            None
        };
        let mut total = kl;
        for term in [sim, fst, recon].into_iter().flatten() {
            total = total.add(term);
        }
        let terms = AugTerms {
            sim: sim.map_or(0.0, |v| v.item()),
            fst: fst.map_or(0.0, |v| v.item()),
            kl: kl.item(),
            recon: recon.map_or(0.0, |v| v.item()),
            total: total.item(),
        };
        let grads = g.backward(total);
        Ok((terms, aug.collect_grads(&pa, &grads)))
    }

    /// `L_gf` at `gf` (with the current `θ^aug` frozen) and its gradient.
    pub fn gf_loss(&self, gf: &ParamStore, batch: &Batch, noise: &StepNoise) -> Result<(GfTerms, Vec<Tensor>)> {
        let cfg = &self.config;
        let g = Graph::new();
        let pg = gf.bind(&g);
        let pa = self.model.aug.bind_frozen(&g);
        let real = g.constant(batch.inputs.clone());
        let adj = self.adjacency_var(&pg, real, &noise.gumbel_real)?;
        let pred = self.model.backbone.forward(&pg, real, adj)?;
        let ori = forecast_loss(pred, &batch.targets, cfg.loss_ori)?;
        let fst = if cfg.fst_in_phase2() {
            Some(self.forecastability(&g, &pa, &pg, batch, noise)?.0)
        } else {
            None
        };
        let total = match fst {
            Some(f) => f.add(ori),
            None => ori,
        };
        let terms = GfTerms {
            fst: fst.map_or(0.0, |v| v.item()),
            ori: ori.item(),
            total: total.item(),
        };
        let grads = g.backward(total);
        Ok((terms, gf.collect_grads(&pg, &grads)))
    }

    /// One Adam update of `θ^aug`; `θ^gf` is untouched.
    pub fn phase1_step(&mut self, starts: &[usize]) -> Result<AugTerms> {
        let batch = self.batch(starts);
        let noise = self.draw_noise(starts.len())?;
        self.phase1_apply(&batch, &noise)
    }

    fn phase1_apply(&mut self, batch: &Batch, noise: &StepNoise) -> Result<AugTerms> {
        let (terms, mut grads) = self.aug_loss(&self.model.aug, batch, noise)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "phase 1 at epoch {}: L_sim={} L_fst={} L_KL={} L_recon={} L_aug={}",
                self.epoch + 1,
                terms.sim,
                terms.fst,
                terms.kl,
                terms.recon,
                terms.total
            )));
        }
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }
        self.aug_opt.update(&mut self.model.aug, &grads);
        self.phase1_steps += 1;
        Ok(terms)
    }

    /// One Adam update of `θ^gf`; `θ^aug` is untouched.
    pub fn phase2_step(&mut self, starts: &[usize]) -> Result<GfTerms> {
        let batch = self.batch(starts);
        let noise = self.draw_noise(starts.len())?;
        self.phase2_apply(&batch, &noise)
    }

    fn phase2_apply(&mut self, batch: &Batch, noise: &StepNoise) -> Result<GfTerms> {
        let (terms, mut grads) = self.gf_loss(&self.model.gf, batch, noise)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "phase 2 at epoch {}: L_fst={} L_ori={} L_gf={}",
                self.epoch + 1,
                terms.fst,
                terms.ori,
                terms.total
            )));
        }
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }
        self.gf_opt.update(&mut self.model.gf, &grads);
        self.phase2_steps += 1;
        Ok(terms)
    }

    /// Shuffled batches of window starts for the next epoch.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut starts: Vec<usize> = self.train_starts().collect();
        starts.shuffle(&mut self.rngs.data);
        let mut batches: Vec<Vec<usize>> = starts.chunks(self.config.batch_size).map(|c| c.to_vec()).collect();
        if let Some(cap) = self.config.max_batches_per_epoch {
            batches.truncate(cap);
        }
        batches
    }

    /// Run one epoch of alternating updates followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let clock = Instant::now();
        let batches = self.epoch_batches();
        let aug = self.config.use_augmentation;
        let (p1_before, p2_before) = (self.phase1_steps, self.phase2_steps);
        let mut a_sum = AugTerms::default();
        let mut g_sum = GfTerms::default();
        let mut add_a = |t: AugTerms| {
            a_sum.sim += t.sim;
            a_sum.fst += t.fst;
            a_sum.kl += t.kl;
            a_sum.recon += t.recon;
            a_sum.total += t.total;
        };
        let mut add_g = |t: GfTerms| {
            g_sum.fst += t.fst;
            g_sum.ori += t.ori;
            g_sum.total += t.total;
        };
        match self.config.alternation {
            Alternation::PerEpoch => {
                if aug {
                    for b in &batches {
                        add_a(self.phase1_step(b)?);
                    }
                }
                for b in &batches {
                    add_g(self.phase2_step(b)?);
                }
            }
            Alternation::PerBatch => {
                for b in &batches {
                    if aug {
                        add_a(self.phase1_step(b)?);
                    }
                    add_g(self.phase2_step(b)?);
                }
            }
        }
        let n1 = (self.phase1_steps - p1_before).max(1) as f64;
        let n2 = (self.phase2_steps - p2_before).max(1) as f64;
        let val_mae = self.validate()?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            l_sim: a_sum.sim / n1,
            l_fst: g_sum.fst / n2,
            l_kl: a_sum.kl / n1,
            l_aug: a_sum.total / n1,
            l_ori: g_sum.ori / n2,
            l_gf: g_sum.total / n2,
            l_fst_aug: a_sum.fst / n1,
            l_recon: a_sum.recon / n1,
            val_mae,
            wall_seconds: clock.elapsed().as_secs_f64(),
            phase1_steps: self.phase1_steps - p1_before,
            phase2_steps: self.phase2_steps - p2_before,
        })
    }

    /// Denormalised MAE over validation windows of the training nodes.
    pub fn validate(&self) -> Result<f64> {
        let forecaster = self.model.forecaster(&self.config, self.train_adjacency.as_ref());
        let starts: Vec<usize> = self.val_starts().collect();
        let n = self.num_train_nodes();
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for (chunk_idx, chunk) in starts.chunks(self.config.batch_size.max(1)).enumerate() {
            let batch = self.batch(chunk);
            let noise = stacked_eval_noise(
                self.config.eval_seed,
                chunk_idx * self.config.batch_size,
                chunk.len(),
                n,
            );
            let pred = forecaster.predict(&batch.inputs, &noise)?;
            let pred = self.norm.invert(&pred)?;
            let target = self.norm.invert(&batch.targets)?;
            for (p, t) in pred.iter().zip(target.iter()) {
                if t.is_finite() {
                    abs_sum += (p - t).abs();
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Empty("no validation targets".into()));
        }
        Ok(abs_sum / count as f64)
    }

    /// Record a finished epoch: update the best snapshot and report whether
    /// training should stop.
    fn observe(&mut self, record: &EpochRecord) -> bool {
        self.val_history.push(record.val_mae);
        if record.val_mae < self.best_val_mae {
            self.best_val_mae = record.val_mae;
            self.best_epoch = record.epoch;
            self.epochs_since_improvement = 0;
            self.best_params = Some((self.model.aug.clone(), self.model.gf.clone()));
        } else {
            self.epochs_since_improvement += 1;
        }
        early_stop(&self.val_history, self.config.patience)
    }

    /// Train until `max_epochs` or early stopping, calling `on_epoch` after
    /// every epoch, then restore the best-validation parameters.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>) -> Result<TrainSummary> {
        let mut records = Vec::new();
        let mut stopped_early = early_stop(&self.val_history, self.config.patience);
        while !stopped_early && self.epoch < self.config.max_epochs {
            let record = self.run_epoch()?;
            stopped_early = self.observe(&record);
            on_epoch(self, &record)?;
            log::info!(
                "epoch {} L_aug={:.5} L_gf={:.5} val_mae={:.5}",
                record.epoch,
                record.l_aug,
                record.l_gf,
                record.val_mae
            );
            records.push(record);
        }
        self.restore_best();
        Ok(TrainSummary {
            records,
            best_epoch: self.best_epoch,
            best_val_mae: self.best_val_mae,
            stopped_early,
        })
    }

    /// Load the best-validation snapshot into the live parameters.
    pub fn restore_best(&mut self) {
        if let Some((aug, gf)) = &self.best_params {
            self.model.aug = aug.clone();
            self.model.gf = gf.clone();
        }
    }

    pub fn best_params(&self) -> Option<(&ParamStore, &ParamStore)> {
        self.best_params.as_ref().map(|(a, g)| (a, g))
    }
}

/// `[B, M, M]` evaluation noise for windows `first..first + count`.
pub fn stacked_eval_noise(eval_seed: u64, first: usize, count: usize, m: usize) -> GumbelNoise {
    let mut diff = Tensor::zeros(IxDyn(&[count, m, m]));
    for k in 0..count {
        let one = eval_noise(eval_seed, (first + k) as u64, &[m, m]);
        diff.index_axis_mut(Axis(0), k).assign(&one.diff);
    }
    GumbelNoise { diff }
}

/// Masked MAE or MSE against `target`, ignoring non-finite targets.
pub fn forecast_loss<'g>(pred: Var<'g>, target: &Tensor, kind: LossKind) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mask = target.mapv(|t| if t.is_finite() { 1.0 } else { 0.0 });
    let count = mask.sum();
    if count == 0.0 {
        return Err(Error::Empty("forecast loss over zero observed targets".into()));
    }
    let clean = target.mapv(|t| if t.is_finite() { t } else { 0.0 });
    let g = pred.graph();
    let diff = pred.sub(g.constant(clean)).mul(g.constant(mask));
    let per = match kind {
        LossKind::Mae => diff.abs(),
        LossKind::Mse => diff.square(),
    };
    Ok(per.sum().scale(1.0 / count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_data::{split_nodes_bfs, synth_generate, SynthConfig};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            patience: 2,
            batch_size: 4,
            latent_dim: 3,
            aug_hidden: 5,
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

    fn setup(cfg: TrainConfig) -> Trainer {
        let graph = synth_generate(&SynthConfig::new(8, 120, 1)).unwrap();
        let split = split_nodes_bfs(graph.adjacency.as_ref(), 8, cfg.ratio, cfg.seed).unwrap();
        Trainer::new(cfg, &graph, split).unwrap()
    }

    #[test]
    fn early_stop_semantics() {
        let decreasing: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
        for end in 1..=50 {
            assert!(!early_stop(&decreasing[..end], 10));
        }
        let mut plateau = vec![5.0];
        plateau.extend(std::iter::repeat(5.0).take(10));
        assert!(early_stop(&plateau, 10));
        assert!(!early_stop(&plateau[..10], 10));
        let mut reset = vec![5.0; 9];
        reset.push(4.0);
        reset.extend(std::iter::repeat(4.5).take(9));
        assert!(!early_stop(&reset, 10));
        reset.push(4.5);
        assert!(early_stop(&reset, 10));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { patience: 200, ..TrainConfig::default() },
            TrainConfig { lambda: 0.7, ..TrainConfig::default() },
            TrainConfig { phi: 0.0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { optimizer: "sgd".into(), ..TrainConfig::default() },
            TrainConfig { epsilon: 1.5, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay), (2e-2, 1e-3));
        assert_eq!((c.lambda, c.epsilon, c.phi), (0.5, 0.9, 0.1));
        assert_eq!((c.batch_size, c.patience, c.model.hidden_dim), (16, 10, 64));
    }

    #[test]
    fn phases_touch_only_their_own_parameters() {
        let mut t = setup(tiny_config());
        for k in 0..3 {
            let gf = t.model.gf.clone();
            let aug = t.model.aug.clone();
            t.phase1_step(&[k, k + 5]).unwrap();
            assert_eq!(t.model.gf, gf);
            assert_ne!(t.model.aug, aug);
            let aug = t.model.aug.clone();
            t.phase2_step(&[k + 1]).unwrap();
            assert_eq!(t.model.aug, aug);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut t = setup(tiny_config());
        t.aug_opt.lr = 0.0;
        let aug = t.model.aug.clone();
        t.phase1_step(&[0, 1]).unwrap();
        assert_eq!(t.model.aug, aug);
    }

    #[test]
    fn phase2_total_is_the_sum_of_its_terms() {
        let mut t = setup(tiny_config());
        let terms = t.phase2_step(&[0, 3, 6]).unwrap();
        assert!((terms.total - (terms.fst + terms.ori)).abs() <= 1e-9);
        assert!(terms.fst > 0.0);

        let mut t = setup(TrainConfig {
            use_augmentation: false,
            ..tiny_config()
        });
        let terms = t.phase2_step(&[0, 3, 6]).unwrap();
        assert_eq!(terms.fst, 0.0);
        assert_eq!(terms.total, terms.ori);
    }

    #[test]
    fn one_epoch_runs_each_phase_once_per_batch() {
        let mut t = setup(TrainConfig {
            max_epochs: 1,
            patience: 1,
            ..tiny_config()
        });
        let summary = t.fit(|_, _| Ok(())).unwrap();
        assert_eq!(summary.records.len(), 1);
        let r = &summary.records[0];
        assert_eq!((r.phase1_steps, r.phase2_steps), (2, 2));
        assert!(r.l_kl >= 0.0);
        assert!((r.l_gf - (r.l_fst + r.l_ori)).abs() <= 1e-9);
        assert!((r.l_aug - (r.l_sim + r.l_fst_aug + r.l_kl)).abs() <= 1e-9);

        let mut t = setup(TrainConfig {
            max_epochs: 1,
            patience: 1,
            use_augmentation: false,
            ..tiny_config()
        });
        let r = t.fit(|_, _| Ok(())).unwrap().records.remove(0);
        assert_eq!(r.phase1_steps, 0);
        assert_eq!(t.phase1_steps, 0);
    }

    #[test]
    fn identical_seeds_give_identical_records() {
        let run = || {
            let mut t = setup(tiny_config());
            let mut recs = t.fit(|_, _| Ok(())).unwrap().records;
            for r in &mut recs {
                r.wall_seconds = 0.0;
            }
            recs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = stream_rng(9, 3);
        let _: u64 = rand::Rng::random(&mut rng);
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).unwrap();
        let mut back = serde_json::from_str::<RngState>(&json).unwrap().restore();
        for _ in 0..10 {
            assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut back));
        }
    }

    #[test]
    fn static_adjacency_modes() {
        let known = ndarray::array![[0.0, 2.0], [2.0, 0.0]];
        let d = static_adjacency(AdjacencyMode::Dataset, 3, Some(&known)).unwrap().unwrap();
        assert_eq!(d, ndarray::array![[0.0, 2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let f = static_adjacency(AdjacencyMode::Full, 2, None).unwrap().unwrap();
        assert_eq!(f, ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
        let i = static_adjacency(AdjacencyMode::Identity, 2, None).unwrap().unwrap();
        assert_eq!(i, Array2::<f64>::eye(2));
        assert!(static_adjacency(AdjacencyMode::Learned, 2, None).unwrap().is_none());
    }

    #[test]
    fn forecast_loss_masks_missing_targets() {
        let g = Graph::new();
        let pred = g.constant(ndarray::array![1.0, 2.0, 3.0].into_dyn());
        let target = ndarray::array![2.0, f64::NAN, 5.0].into_dyn();
        assert_eq!(forecast_loss(pred, &target, LossKind::Mae).unwrap().item(), 1.5);
        assert_eq!(forecast_loss(pred, &target, LossKind::Mse).unwrap().item(), 2.5);
    }
}
