//! Temporal data augmentation on a learned latent manifold.
//!
//! A VAE encodes each real `(κ+τ)`-step window into a Gaussian latent. Pairs
//! of sampled latents are mixed (`λ·z_i + (1−λ)·z_j`) and decoded into new
//! series, which are appended to the training graph as virtual nodes.
//!
//! Objectives:
//! - similarity: cosine between the re-encoded generated series and both
//!   parents, weighted by `λ` and negated for minimisation;
//! - forecastability: the backbone must predict the last τ steps of each
//!   generated series from its first κ steps;
//! - KL divergence of the encoder posterior from `N(0, I)`.

use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Bounds applied to the encoder's log standard deviation.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-8.0, 8.0);

/// One mixed pair; indices are positions in the training node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPair {
    pub i: usize,
    pub j: usize,
}

/// Validate a mix-up ratio.
pub fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 0.5 {
        Ok(())
    } else {
        Err(Error::Config(format!("mix-up ratio {lambda} outside (0, 0.5]")))
    }
}

/// MLP VAE over flattened `(κ+τ)·C` windows.
#[derive(Debug, Clone)]
pub struct Vae {
    pub window_len: usize,
    pub channels: usize,
    pub latent_dim: usize,
    enc_hidden: Linear,
    enc_mu: Linear,
    enc_log_sigma: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
}

/// Encoder outputs for a set of windows.
#[derive(Clone, Copy)]
pub struct Posterior<'g> {
    pub mu: Var<'g>,
    /// Clamped `ln σ`.
    pub log_sigma: Var<'g>,
}

impl<'g> Posterior<'g> {
    pub fn sigma(&self) -> Var<'g> {
        self.log_sigma.exp()
    }
}

impl Vae {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        window_len: usize,
        channels: usize,
        hidden: usize,
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let flat = window_len * channels;
        Vae {
            window_len,
            channels,
            latent_dim,
            enc_hidden: Linear::new(store, &format!("{prefix}.encoder.hidden"), flat, hidden, true, rng),
            enc_mu: Linear::new(store, &format!("{prefix}.encoder.mu"), hidden, latent_dim, true, rng),
            enc_log_sigma: Linear::new(store, &format!("{prefix}.encoder.log_sigma"), hidden, latent_dim, true, rng),
            dec_hidden: Linear::new(store, &format!("{prefix}.decoder.hidden"), latent_dim, hidden, true, rng),
            dec_out: Linear::new(store, &format!("{prefix}.decoder.out"), hidden, flat, true, rng),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.window_len * self.channels
    }

    /// `windows`: `[..., (κ+τ)·C]` → `μ, ln σ` of shape `[..., d]`.
    pub fn encode<'g>(&self, p: &Bound<'g>, windows: Var<'g>) -> Result<Posterior<'g>> {
        let last = windows.shape().last().copied().unwrap_or(0);
        if last != self.flat_len() {
            return Err(Error::Shape(format!(
                "window of flattened length {last}, expected {} ({}×{})",
                self.flat_len(),
                self.window_len,
                self.channels
            )));
        }
        let h = self.enc_hidden.forward(p, windows).relu();
        let (lo, hi) = LOG_SIGMA_RANGE;
        Ok(Posterior {
            mu: self.enc_mu.forward(p, h),
            log_sigma: self.enc_log_sigma.forward(p, h).clamp(lo, hi),
        })
    }

    /// `ẑ` of shape `[..., d]` → series `[..., (κ+τ)·C]`.
    pub fn decode<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let last = z.shape().last().copied().unwrap_or(0);
        if last != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent of size {last}, expected {}",
                self.latent_dim
            )));
        }
        let h = self.dec_hidden.forward(p, z).relu();
        Ok(self.dec_out.forward(p, h))
    }

    /// Generate virtual series for every anchor in a batch.
    ///
    /// `windows`: `[B, N_train, (κ+τ)·C]`; `noise`: standard normal draws of
    /// shape `[B, N_train, d]`. The same pairs are used at every anchor.
    pub fn generate<'g>(
        &self,
        p: &Bound<'g>,
        windows: Var<'g>,
        pairs: &[MixPair],
        lambda: f64,
        noise: &Tensor,
    ) -> Result<Generation<'g>> {
        check_lambda(lambda)?;
        let shape = windows.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("expected [B, N, L·C] windows, got {shape:?}")));
        }
        let n = shape[1];
        if let Some(bad) = pairs.iter().find(|pr| pr.i >= n || pr.j >= n) {
            return Err(Error::Shape(format!("pair {bad:?} references a missing node")));
        }
        let posterior = self.encode(p, windows)?;
        let z = sample_latent(posterior, noise)?;
        let left: Vec<usize> = pairs.iter().map(|pr| pr.i).collect();
        let right: Vec<usize> = pairs.iter().map(|pr| pr.j).collect();
        let z_i = z.select(1, &left);
        let z_j = z.select(1, &right);
        let z_mix = mixup(z_i, z_j, lambda)?;
        let series = self.decode(p, z_mix)?;
        Ok(Generation {
            posterior,
            z,
            z_i,
            z_j,
            z_mix,
            series,
        })
    }

    /// Series of shape `[B, K, (κ+τ)·C]` → `[B, κ+τ, K, C]`.
    pub fn series_to_nodes<'g>(&self, series: Var<'g>) -> Var<'g> {
        let s = series.shape();
        series
            .reshape(&[s[0], s[1], self.window_len, self.channels])
            .permute(&[0, 2, 1, 3])
    }
}

/// Everything computed while generating one batch of virtual nodes.
#[derive(Clone, Copy)]
pub struct Generation<'g> {
    pub posterior: Posterior<'g>,
    pub z: Var<'g>,
    pub z_i: Var<'g>,
    pub z_j: Var<'g>,
    pub z_mix: Var<'g>,
    /// `[B, K, (κ+τ)·C]`
    pub series: Var<'g>,
}

/// Reparameterised sample `z = μ + σ ⊙ ε`.
pub fn sample_latent<'g>(posterior: Posterior<'g>, noise: &Tensor) -> Result<Var<'g>> {
    if noise.shape() != posterior.mu.shape().as_slice() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match latent {:?}",
            noise.shape(),
            posterior.mu.shape()
        )));
    }
    let eps = posterior.mu.graph().constant(noise.clone());
    Ok(posterior.mu.add(posterior.sigma().mul(eps)))
}

/// Standard normal draws of `shape`.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(rng))
}

/// `λ·z_i + (1−λ)·z_j`.
pub fn mixup<'g>(z_i: Var<'g>, z_j: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    check_lambda(lambda)?;
    if z_i.shape() != z_j.shape() {
        return Err(Error::Shape(format!(
            "mix-up of {:?} with {:?}",
            z_i.shape(),
            z_j.shape()
        )));
    }
    Ok(z_i.scale(lambda).add(z_j.scale(1.0 - lambda)))
}

/// `K` ordered pairs of distinct positions in `0..num_train`, uniform per pair.
pub fn sample_pairs(num_train: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<MixPair>> {
    if num_train < 2 {
        return Err(Error::Config(format!(
            "mix-up needs at least 2 training nodes, have {num_train}"
        )));
    }
    if k == 0 {
        return Err(Error::Config("number of pairs must be at least 1".into()));
    }
    Ok((0..k)
        .map(|_| {
            let i = rng.random_range(0..num_train);
            let mut j = rng.random_range(0..num_train - 1);
            if j >= i {
                j += 1;
            }
            MixPair { i, j }
        })
        .collect())
}

/// Cosine similarity along the last axis; zero when either side is zero.
pub fn cosine<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let last = a.shape().len() - 1;
    let dot = a.mul(b).sum_axis(last);
    let norms = a
        .square()
        .sum_axis(last)
        .mul(b.square().sum_axis(last))
        .clamp(1e-24, f64::INFINITY)
        .sqrt();
    dot.div(norms)
}

/// Per-pair similarity `s = λ·cos(ẑ, z_i) + (1−λ)·cos(ẑ, z_j)`, keeping the
/// leading axes and a trailing axis of one.
pub fn pair_similarity<'g>(z_gen: Var<'g>, z_i: Var<'g>, z_j: Var<'g>, lambda: f64) -> Var<'g> {
    cosine(z_gen, z_i)
        .scale(lambda)
        .add(cosine(z_gen, z_j).scale(1.0 - lambda))
}

/// Similarity loss: the negated mean of [`pair_similarity`].
pub fn loss_sim<'g>(z_gen: Var<'g>, z_i: Var<'g>, z_j: Var<'g>, lambda: f64) -> Var<'g> {
    pair_similarity(z_gen, z_i, z_j, lambda).mean().neg()
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over latent dims, averaged over the rest.
pub fn loss_kl<'g>(posterior: Posterior<'g>) -> Var<'g> {
    let mu = posterior.mu;
    let ls = posterior.log_sigma;
    let last = mu.shape().len() - 1;
    mu.square()
        .add(ls.scale(2.0).exp())
        .add_scalar(-1.0)
        .sub(ls.scale(2.0))
        .scale(0.5)
        .sum_axis(last)
        .mean()
}

/// Closed-form KL for plain vectors (used by reports and tests).
pub fn kl_value(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

/// Forecastability of generated series.
///
/// `generated`: `[B, κ+τ, K, C]`; `real_inputs`: optional `[B, κ, N_train, C]`
/// real windows placed before the virtual nodes; `adjacency` covers all
/// `N_train + K` nodes. Returns the mean squared error of the backbone's
/// forecast against the last τ steps, over virtual nodes only.
pub fn loss_fst<'g>(
    backbone: &dyn Backbone,
    params: &Bound<'g>,
    generated: Var<'g>,
    real_inputs: Option<Var<'g>>,
    adjacency: Var<'g>,
) -> Result<Var<'g>> {
    let cfg = backbone.config();
    let (kappa, tau) = (cfg.input_steps, cfg.output_steps);
    let gs = generated.shape();
    if gs.len() != 4 || gs[1] != kappa + tau {
        return Err(Error::Shape(format!(
            "generated series {gs:?} must have length κ+τ = {}",
            kappa + tau
        )));
    }
    let virt_in = generated.slice_axis(1, 0, kappa);
    let virt_target = generated.slice_axis(1, kappa, kappa + tau);
    let (joint, offset) = match real_inputs {
        Some(real) => {
            let n_real = real.shape()[2];
            (generated.graph().concat(&[real, virt_in], 2), n_real)
        }
        None => (virt_in, 0),
    };
    let pred = backbone.forward(params, joint, adjacency)?;
    let k = gs[2];
    let virt_pred = pred.slice_axis(2, offset, offset + k);
    Ok(virt_pred.sub(virt_target).square().mean())
}

/// Optional reconstruction term: MSE between decoded posterior means and the
/// real windows.
pub fn loss_reconstruction<'g>(vae: &Vae, p: &Bound<'g>, windows: Var<'g>, posterior: Posterior<'g>) -> Result<Var<'g>> {
    let recon = vae.decode(p, posterior.mu)?;
    Ok(recon.sub(windows).square().mean())
}

/// Seeded random latent representations (row per node), used to draw
/// reproducible noise matrices outside a graph.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
