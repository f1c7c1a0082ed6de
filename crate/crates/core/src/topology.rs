//! Spatial topology learning.
//!
//! Per anchor, every node's κ-step input window is encoded by a shared MLP;
//! a pair MLP scores each ordered pair into `P ∈ (0, 1)`; `P` is sparsified
//! into edge probabilities `P̂` and a two-class Gumbel-Softmax draws the
//! adjacency `Ã`. Nothing depends on the number of nodes, so the same
//! parameters serve the training subgraph (with virtual nodes) and the full
//! graph at inference.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, ParamStore};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before taking logits.
pub const PROB_FLOOR: f64 = 1e-12;

/// How raw pair scores become edge probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsifyVariant {
    /// `sigmoid((P − ε) / φ)`
    #[default]
    SoftThreshold,
    /// `sigmoid(exp((P − ε) / φ))`
    Paper,
}

impl fmt::Display for SparsifyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SparsifyVariant::SoftThreshold => "soft-threshold",
            SparsifyVariant::Paper => "paper",
        })
    }
}

impl FromStr for SparsifyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft-threshold" => Ok(SparsifyVariant::SoftThreshold),
            "paper" => Ok(SparsifyVariant::Paper),
            other => Err(Error::Config(format!(
                "unknown sparsify variant {other:?} (expected \"soft-threshold\" or \"paper\")"
            ))),
        }
    }
}

/// Sparsification and sampling knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Threshold `ε`.
    pub epsilon: f64,
    /// Sparsification temperature `φ`.
    pub phi: f64,
    /// Gumbel-Softmax temperature `s`.
    pub temperature: f64,
    pub variant: SparsifyVariant,
    /// Hard (straight-through) samples instead of relaxed ones.
    pub hard: bool,
    /// Replace `Ã` by `max(Ã, Ãᵀ)`.
    pub symmetrize: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            epsilon: 0.9,
            phi: 0.1,
            temperature: 0.5,
            variant: SparsifyVariant::SoftThreshold,
            hard: true,
            symmetrize: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        check_phi(self.phi)?;
        check_temperature(self.temperature)
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsify temperature phi must be positive, got {phi}")))
    }
}

fn check_temperature(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("Gumbel temperature must be positive, got {s}")))
    }
}

/// Scalar sparsification, for reports and oracles.
pub fn sparsify_value(p: f64, epsilon: f64, phi: f64, variant: SparsifyVariant) -> Result<f64> {
    check_phi(phi)?;
    let u = (p - epsilon) / phi;
    Ok(match variant {
        SparsifyVariant::SoftThreshold => sigmoid(u),
        SparsifyVariant::Paper => sigmoid(u.exp()),
    })
}

/// Elementwise sparsification of a score tensor.
pub fn sparsify<'g>(p: Var<'g>, epsilon: f64, phi: f64, variant: SparsifyVariant) -> Result<Var<'g>> {
    check_phi(phi)?;
    let u = p.add_scalar(-epsilon).scale(1.0 / phi);
    Ok(match variant {
        SparsifyVariant::SoftThreshold => u.sigmoid(),
        SparsifyVariant::Paper => u.exp().sigmoid(),
    })
}

/// Gumbel noise for a batch of two-class samples, stored as the difference
/// `g_edge − g_no_edge` of two standard Gumbel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub diff: Tensor,
}

impl GumbelNoise {
    pub fn sample(shape: &[usize], rng: &mut impl Rng) -> Self {
        let mut gumbel = || {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        };
        let diff = Tensor::from_shape_simple_fn(IxDyn(shape), || {
            let edge = gumbel();
            edge - gumbel()
        });
        GumbelNoise { diff }
    }

    /// No noise: hard samples become thresholding at `P̂ = 0.5`.
    pub fn zeros(shape: &[usize]) -> Self {
        GumbelNoise {
            diff: Tensor::zeros(IxDyn(shape)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.diff.shape()
    }
}

/// Two-class Gumbel-Softmax over `(ln P̂, ln(1 − P̂))` for every entry of
/// `p_hat` (`[..., M, M]`). Returns edge weights with a zero diagonal.
///
/// Hard mode yields `{0, 1}` entries whose gradient is that of the relaxed
/// sample.
pub fn sample_adjacency<'g>(p_hat: Var<'g>, temperature: f64, hard: bool, noise: &GumbelNoise) -> Result<Var<'g>> {
    check_temperature(temperature)?;
    let shape = p_hat.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::Shape(format!("edge probabilities must be square, got {shape:?}")));
    }
    if noise.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "Gumbel noise {:?} does not match probabilities {shape:?}",
            noise.shape()
        )));
    }
    let g = p_hat.graph();
    let c = p_hat.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let logit = c.ln().sub(c.neg().add_scalar(1.0).ln());
    let perturbed = logit.add(g.constant(noise.diff.clone()));
    let soft = perturbed.scale(1.0 / temperature).sigmoid();
    let off_diag = g.constant(off_diagonal_mask(shape[shape.len() - 1]));
    let sample = if hard {
        let hard_values = perturbed.value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        g.straight_through(hard_values, soft)
    } else {
        soft
    };
    Ok(sample.mul(off_diag))
}

/// `1 − I` as an `[M, M]` tensor.
pub fn off_diagonal_mask(m: usize) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[m, m]), |ix| if ix[0] == ix[1] { 0.0 } else { 1.0 })
}

/// `max(A, Aᵀ)` over the last two axes.
pub fn symmetrize<'g>(a: Var<'g>) -> Var<'g> {
    let rank = a.shape().len();
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 1, rank - 2);
    a.maximum(a.permute(&axes))
}

/// `A₀_ij = 1` iff `cos(rep_i, rep_j) ≥ threshold`, `i ≠ j`.
pub fn cosine_adjacency(reps: &Array2<f64>, threshold: f64) -> Array2<f64> {
    let n = reps.nrows();
    let norms: Vec<f64> = reps.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return 0.0;
        }
        let denom = norms[i] * norms[j];
        let cos = if denom > 0.0 {
            reps.row(i).dot(&reps.row(j)) / denom
        } else {
            0.0
        };
        if cos >= threshold {
            1.0
        } else {
            0.0
        }
    })
}

/// Fallback adjacency for datasets without a graph: cosine similarity of
/// seeded random representations.
pub fn init_adjacency_cosine(num_nodes: usize, dim: usize, threshold: f64, rng: &mut impl Rng) -> Array2<f64> {
    let reps = Array2::from_shape_simple_fn((num_nodes, dim), || StandardNormal.sample(rng));
    cosine_adjacency(&reps, threshold)
}

/// Rearrange backbone inputs `[B, κ, M, C]` into per-node windows `[B, M, κ·C]`.
pub fn node_windows<'g>(x: Var<'g>) -> Var<'g> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3]).reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Everything produced by one pass of the topology pipeline.
#[derive(Clone, Copy)]
pub struct Topology<'g> {
    /// Raw pair scores `[B, M, M]`.
    pub scores: Var<'g>,
    /// Edge probabilities `[B, M, M]`.
    pub probs: Var<'g>,
    /// Sampled adjacency `[B, M, M]`.
    pub adjacency: Var<'g>,
}

/// Window encoder plus pair scorer.
#[derive(Debug, Clone)]
pub struct TopologyLearner {
    pub input_steps: usize,
    pub channels: usize,
    pub rep_dim: usize,
    encoder: Mlp,
    left: Linear,
    right: Linear,
    out: Linear,
}

impl TopologyLearner {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_steps: usize,
        channels: usize,
        hidden: usize,
        rep_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        TopologyLearner {
            input_steps,
            channels,
            rep_dim,
            encoder: Mlp::new(
                store,
                &format!("{prefix}.encoder"),
                &[input_steps * channels, hidden, rep_dim],
                rng,
            ),
            left: Linear::new(store, &format!("{prefix}.pair.left"), rep_dim, hidden, false, rng),
            right: Linear::new(store, &format!("{prefix}.pair.right"), rep_dim, hidden, true, rng),
            out: Linear::new(store, &format!("{prefix}.pair.out"), hidden, 1, true, rng),
        }
    }

    /// `[..., M, κ·C]` → `[..., M, d]`.
    pub fn encode_windows<'g>(&self, p: &Bound<'g>, windows: Var<'g>) -> Result<Var<'g>> {
        let s = windows.shape();
        let flat = self.input_steps * self.channels;
        if s.len() < 2 || s[s.len() - 1] != flat {
            return Err(Error::Shape(format!(
                "topology windows {s:?} must end in κ·C = {flat}"
            )));
        }
        if s[s.len() - 2] == 0 {
            return Err(Error::Shape("topology needs at least one node".into()));
        }
        Ok(self.encoder.forward(p, windows))
    }

    /// Representations `[B, M, d]` → scores `[B, M, M]` in `(0, 1)`.
    ///
    /// `P_ij = σ(w·relu(W_l rep_i + W_r rep_j + b) + c)`, i.e. an MLP on
    /// the concatenation `[rep_i ‖ rep_j]`.
    pub fn pair_scores<'g>(&self, p: &Bound<'g>, reps: Var<'g>) -> Result<Var<'g>> {
        let s = reps.shape();
        if s.len() != 3 || s[2] != self.rep_dim {
            return Err(Error::Shape(format!(
                "expected representations [B, M, {}], got {s:?}",
                self.rep_dim
            )));
        }
        let (b, m) = (s[0], s[1]);
        let h = self.left.out_dim;
        let left = self.left.forward(p, reps).reshape(&[b, m, 1, h]);
        let right = self.right.forward(p, reps).reshape(&[b, 1, m, h]);
        let hidden = left.add(right).relu();
        Ok(self.out.forward(p, hidden).reshape(&[b, m, m]).sigmoid())
    }

    /// Full pipeline on backbone-layout inputs `[B, κ, M, C]`.
    pub fn topology<'g>(
        &self,
        p: &Bound<'g>,
        inputs: Var<'g>,
        cfg: &SamplerConfig,
        noise: &GumbelNoise,
    ) -> Result<Topology<'g>> {
        let s = inputs.shape();
        if s.len() != 4 || s[1] != self.input_steps || s[3] != self.channels {
            return Err(Error::Shape(format!(
                "topology inputs {s:?} must be [B, {}, M, {}]",
                self.input_steps, self.channels
            )));
        }
        let reps = self.encode_windows(p, node_windows(inputs))?;
        let scores = self.pair_scores(p, reps)?;
        let probs = sparsify(scores, cfg.epsilon, cfg.phi, cfg.variant)?;
        let mut adjacency = sample_adjacency(probs, cfg.temperature, cfg.hard, noise)?;
        if cfg.symmetrize {
            adjacency = symmetrize(adjacency);
        }
        Ok(Topology {
            scores,
            probs,
            adjacency,
        })
    }

    /// Joint topology over real training nodes followed by virtual nodes.
    ///
    /// `real`: `[B, κ, N_train, C]`; `virtual_inputs`: `[B, κ, K, C]`.
    pub fn extend_for_virtual<'g>(
        &self,
        p: &Bound<'g>,
        real: Var<'g>,
        virtual_inputs: Option<Var<'g>>,
        cfg: &SamplerConfig,
        noise: &GumbelNoise,
    ) -> Result<Topology<'g>> {
        let joint = match virtual_inputs {
            Some(v) => real.graph().concat(&[real, v], 2),
            None => real,
        };
        self.topology(p, joint, cfg, noise)
    }
}
