//! Forecasting backbones: STGCN (gated temporal convolutions around a
//! Chebyshev graph convolution), a shared-weight FC-LSTM and the
//! historical-average baseline.
//!
//! All backbones consume `[B, κ, N, C]` inputs with an adjacency of shape
//! `[N, N]` or `[B, N, N]` and return `[B, τ, N, C]`. No parameter is tied to
//! a node index, so the node count may change freely between calls.

use std::fmt;
use std::str::FromStr;

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub cheb_order: usize,
    pub temporal_kernel: usize,
    pub num_st_blocks: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 64,
            cheb_order: 3,
            temporal_kernel: 3,
            num_st_blocks: 2,
            input_steps: 12,
            output_steps: 12,
            channels: 1,
        }
    }
}

impl BackboneConfig {
    /// Input steps consumed by the ST blocks.
    pub fn receptive_field(&self) -> usize {
        self.num_st_blocks * 2 * (self.temporal_kernel.saturating_sub(1)) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.channels == 0 || self.output_steps == 0 {
            return Err(Error::Config(
                "hidden_dim, channels and output_steps must be positive".into(),
            ));
        }
        if self.cheb_order == 0 || self.temporal_kernel == 0 {
            return Err(Error::Config(
                "cheb_order and temporal_kernel must be at least 1".into(),
            ));
        }
        if self.input_steps < self.receptive_field() {
            return Err(Error::Config(format!(
                "input_steps {} is below the temporal receptive field {}",
                self.input_steps,
                self.receptive_field()
            )));
        }
        Ok(())
    }
}

/// Registered backbone names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Stgcn,
    Fclstm,
    Ha,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Stgcn => "stgcn",
            BackboneKind::Fclstm => "fclstm",
            BackboneKind::Ha => "ha",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stgcn" => Ok(BackboneKind::Stgcn),
            "fclstm" => Ok(BackboneKind::Fclstm),
            "ha" => Ok(BackboneKind::Ha),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?}; expected one of stgcn, fclstm, ha"
            ))),
        }
    }
}

/// The forecasting function `h(x, A)`.
pub trait Backbone: Send + Sync {
    fn kind(&self) -> BackboneKind;

    fn config(&self) -> &BackboneConfig;

    /// `x`: `[B, κ, N, C]`; `adjacency`: `[N, N]` or `[B, N, N]`.
    fn forward<'g>(&self, params: &Bound<'g>, x: Var<'g>, adjacency: Var<'g>) -> Result<Var<'g>>;
}

/// Register parameters for `kind` under `prefix` and return the model.
pub fn build_backbone(
    kind: BackboneKind,
    config: &BackboneConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<Box<dyn Backbone>> {
    config.validate()?;
    Ok(match kind {
        BackboneKind::Stgcn => Box::new(Stgcn::new(config.clone(), store, prefix, rng)),
        BackboneKind::Fclstm => Box::new(FcLstm::new(config.clone(), store, prefix, rng)),
        BackboneKind::Ha => Box::new(HistoricalAverage {
            config: config.clone(),
        }),
    })
}

fn check_input(config: &BackboneConfig, x: &[usize], adj: &[usize]) -> Result<()> {
    if x.len() != 4 {
        return Err(Error::Shape(format!("expected [B, κ, N, C] input, got {x:?}")));
    }
    let (steps, n, c) = (x[1], x[2], x[3]);
    if n == 0 {
        return Err(Error::Shape("forecast over zero nodes".into()));
    }
    if steps != config.input_steps || c != config.channels {
        return Err(Error::Shape(format!(
            "input {x:?} does not match κ={} C={}",
            config.input_steps, config.channels
        )));
    }
    let ok = match adj.len() {
        2 => adj == [n, n],
        3 => adj == [x[0], n, n],
        _ => false,
    };
    if !ok {
        return Err(Error::Shape(format!(
            "adjacency {adj:?} does not match {n} nodes"
        )));
    }
    Ok(())
}

/// `L̃ = 2L/λ_max − I` with `λ_max = 2`, i.e. `−D^{-1/2} A D^{-1/2}`.
///
/// Degrees are row sums; zero-degree nodes get a zero `D^{-1/2}` entry.
pub fn scaled_laplacian<'g>(adjacency: Var<'g>) -> Var<'g> {
    let nd = adjacency.shape().len();
    let d = adjacency.sum_axis(nd - 1).inv_sqrt_or_zero();
    let row = d;
    let col = if nd == 2 {
        d.reshape(&[1, adjacency.shape()[0]])
    } else {
        d.permute(&[0, 2, 1])
    };
    adjacency.mul(row).mul(col).neg()
}

/// Chebyshev graph convolution of order `k` over `[B, L, N, F]` features.
#[derive(Debug, Clone)]
pub struct ChebConv {
    pub order: usize,
    pub linear: Linear,
}

impl ChebConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        order: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ChebConv {
            order,
            linear: Linear::new(store, name, order * in_dim, out_dim, true, rng),
        }
    }

    /// `laplacian` is the output of [`scaled_laplacian`].
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, laplacian: Var<'g>) -> Var<'g> {
        let basis = chebyshev_basis(x, laplacian, self.order);
        let stacked = x.graph().concat(&basis, 3);
        self.linear.forward(p, stacked)
    }
}

/// `[T_0 x, T_1 x, …, T_{k-1} x]` with `T_m = 2L̃T_{m−1} − T_{m−2}`.
pub fn chebyshev_basis<'g>(x: Var<'g>, laplacian: Var<'g>, order: usize) -> Vec<Var<'g>> {
    let mut out = vec![x];
    if order > 1 {
        out.push(x.graph_mul(laplacian));
    }
    for m in 2..order {
        let next = out[m - 1].graph_mul(laplacian).scale(2.0).sub(out[m - 2]);
        out.push(next);
    }
    out
}

/// Gated temporal convolution: `(conv_a(x) + residual) ⊙ σ(conv_b(x))`.
///
/// The residual is the aligned input tail and is only added when input and
/// output widths agree.
#[derive(Debug, Clone)]
pub struct GatedTemporalConv {
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub linear: Linear,
}

impl GatedTemporalConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GatedTemporalConv {
            kernel,
            in_dim,
            out_dim,
            linear: Linear::new(store, name, kernel * in_dim, 2 * out_dim, true, rng),
        }
    }

    /// `[B, L, N, F] → [B, L−kernel+1, N, F']`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let len = shape[1];
        if len < self.kernel {
            return Err(Error::Shape(format!(
                "temporal length {len} shorter than kernel {}",
                self.kernel
            )));
        }
        let out_len = len - self.kernel + 1;
        let taps: Vec<Var<'g>> = (0..self.kernel)
            .map(|k| x.slice_axis(1, k, k + out_len))
            .collect();
        let stacked = if taps.len() == 1 {
            taps[0]
        } else {
            x.graph().concat(&taps, 3)
        };
        let conv = self.linear.forward(p, stacked);
        let mut linear = conv.slice_axis(3, 0, self.out_dim);
        let gate = conv.slice_axis(3, self.out_dim, 2 * self.out_dim).sigmoid();
        if self.in_dim == self.out_dim {
            linear = linear.add(x.slice_axis(1, self.kernel - 1, len));
        }
        Ok(linear.mul(gate))
    }
}

#[derive(Debug, Clone)]
struct StBlock {
    temporal_in: GatedTemporalConv,
    spatial: ChebConv,
    temporal_out: GatedTemporalConv,
}

/// Spatio-temporal graph convolutional network.
#[derive(Debug, Clone)]
pub struct Stgcn {
    config: BackboneConfig,
    blocks: Vec<StBlock>,
    head_temporal: GatedTemporalConv,
    head_linear: Linear,
}

impl Stgcn {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let h = config.hidden_dim;
        let k = config.temporal_kernel;
        let blocks = (0..config.num_st_blocks)
            .map(|b| {
                let in_dim = if b == 0 { config.channels } else { h };
                let name = format!("{prefix}.block{b}");
                StBlock {
                    temporal_in: GatedTemporalConv::new(store, &format!("{name}.tconv1"), k, in_dim, h, rng),
                    spatial: ChebConv::new(store, &format!("{name}.cheb"), config.cheb_order, h, h, rng),
                    temporal_out: GatedTemporalConv::new(store, &format!("{name}.tconv2"), k, h, h, rng),
                }
            })
            .collect();
        let remaining = config.input_steps + 1 - config.receptive_field();
        let head_in = if config.num_st_blocks == 0 { config.channels } else { h };
        let head_temporal =
            GatedTemporalConv::new(store, &format!("{prefix}.head.tconv"), remaining, head_in, h, rng);
        let head_linear = Linear::new(
            store,
            &format!("{prefix}.head.linear"),
            h,
            config.output_steps * config.channels,
            true,
            rng,
        );
        Stgcn {
            config,
            blocks,
            head_temporal,
            head_linear,
        }
    }
}

impl Backbone for Stgcn {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Stgcn
    }

    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, adjacency: Var<'g>) -> Result<Var<'g>> {
        check_input(&self.config, &x.shape(), &adjacency.shape())?;
        let (b, n) = (x.shape()[0], x.shape()[2]);
        let lap = scaled_laplacian(adjacency);
        let mut h = x;
        for block in &self.blocks {
            h = block.temporal_in.forward(p, h)?;
            h = block.spatial.forward(p, h, lap).relu();
            h = block.temporal_out.forward(p, h)?;
        }
        let h = self.head_temporal.forward(p, h)?;
        let out = self.head_linear.forward(p, h);
        let (tau, c) = (self.config.output_steps, self.config.channels);
        Ok(out.reshape(&[b, n, tau, c]).permute(&[0, 2, 1, 3]))
    }
}

#[derive(Debug, Clone)]
struct LstmCell {
    input: Linear,
    hidden: Linear,
    hidden_dim: usize,
}

impl LstmCell {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        LstmCell {
            input: Linear::new(store, &format!("{name}.input"), in_dim, 4 * hidden_dim, true, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), hidden_dim, 4 * hidden_dim, false, rng),
            hidden_dim,
        }
    }

    /// One step; gate order is input, forget, cell, output.
    fn step<'g>(&self, p: &Bound<'g>, x: Var<'g>, h: Var<'g>, c: Var<'g>) -> (Var<'g>, Var<'g>) {
        let hd = self.hidden_dim;
        let z = self.input.forward(p, x).add(self.hidden.forward(p, h));
        let i = z.slice_axis(1, 0, hd).sigmoid();
        let f = z.slice_axis(1, hd, 2 * hd).sigmoid();
        let g = z.slice_axis(1, 2 * hd, 3 * hd).tanh();
        let o = z.slice_axis(1, 3 * hd, 4 * hd).sigmoid();
        let c = f.mul(c).add(i.mul(g));
        let h = o.mul(c.tanh());
        (h, c)
    }
}

/// Per-node sequence-to-sequence LSTM with weights shared across nodes.
///
/// The encoder reads the κ input steps; the decoder starts from the last
/// observed step and feeds back its own predictions for τ steps.
#[derive(Debug, Clone)]
pub struct FcLstm {
    config: BackboneConfig,
    encoder: LstmCell,
    decoder: LstmCell,
    output: Linear,
}

impl FcLstm {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let (c, h) = (config.channels, config.hidden_dim);
        FcLstm {
            encoder: LstmCell::new(store, &format!("{prefix}.encoder"), c, h, rng),
            decoder: LstmCell::new(store, &format!("{prefix}.decoder"), c, h, rng),
            output: Linear::new(store, &format!("{prefix}.output"), h, c, true, rng),
            config,
        }
    }
}

impl Backbone for FcLstm {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Fclstm
    }

    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, adjacency: Var<'g>) -> Result<Var<'g>> {
        check_input(&self.config, &x.shape(), &adjacency.shape())?;
        let shape = x.shape();
        let (b, kappa, n, c) = (shape[0], shape[1], shape[2], shape[3]);
        let rows = b * n;
        let seq = x.permute(&[0, 2, 1, 3]).reshape(&[rows, kappa, c]);
        let g = x.graph();
        let zeros = Tensor::zeros(IxDyn(&[rows, self.config.hidden_dim]));
        let mut h = g.constant(zeros.clone());
        let mut cell = g.constant(zeros);
        let step_input = |t: usize| seq.slice_axis(1, t, t + 1).reshape(&[rows, c]);
        for t in 0..kappa {
            (h, cell) = self.encoder.step(p, step_input(t), h, cell);
        }
        let mut prev = step_input(kappa - 1);
        let mut outputs = Vec::with_capacity(self.config.output_steps);
        for _ in 0..self.config.output_steps {
            (h, cell) = self.decoder.step(p, prev, h, cell);
            prev = self.output.forward(p, h);
            outputs.push(prev.reshape(&[rows, 1, c]));
        }
        let tau = self.config.output_steps;
        Ok(g.concat(&outputs, 1)
            .reshape(&[b, n, tau, c])
            .permute(&[0, 2, 1, 3]))
    }
}

/// Every output step is the arithmetic mean of the κ input steps.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    pub config: BackboneConfig,
}

impl Backbone for HistoricalAverage {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Ha
    }

    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn forward<'g>(&self, _p: &Bound<'g>, x: Var<'g>, adjacency: Var<'g>) -> Result<Var<'g>> {
        if x.shape().len() != 4 || x.shape()[1] == 0 {
            return Err(Error::Shape(format!("expected [B, κ, N, C], got {:?}", x.shape())));
        }
        let _ = adjacency;
        let mut shape = x.shape();
        shape[1] = self.config.output_steps;
        let ones = x.graph().constant(Tensor::ones(IxDyn(&shape)));
        Ok(x.mean_axis(1).mul(ones))
    }
}
