//! Parameter storage, dense layers and the Adam optimizer.

use std::ops::Index;

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
///
/// Names are canonical dotted paths (`backbone.block0.tconv1.weight`); the
/// insertion order is the iteration order everywhere, including checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Set every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    /// Record every parameter on `graph` as a trainable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Record every parameter on `graph` as a constant (no gradient).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.constant(t.clone()))
                .collect(),
        }
    }

    /// Gradients for every parameter, zeros where the loss does not depend on it.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    pub fn to_records(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                tensor: TensorRecord::from(t),
            })
            .collect()
    }

    /// Overwrite values from records, matching by name and shape.
    pub fn load_records(&mut self, records: &[NamedTensor]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                records.len()
            )));
        }
        for rec in records {
            let idx = self
                .names
                .iter()
                .position(|n| *n == rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", rec.name)))?;
            let t = rec.tensor.to_tensor()?;
            if t.shape() != self.tensors[idx].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    rec.name,
                    t.shape(),
                    self.tensors[idx].shape()
                )));
            }
            self.tensors[idx] = t;
        }
        Ok(())
    }
}

/// Parameters of a [`ParamStore`] recorded on a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;
    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}

/// Serializable tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        TensorRecord {
            shape: t.shape().to_vec(),
            data: t.iter().copied().collect(),
        }
    }
}

impl TensorRecord {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("bad tensor record: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: TensorRecord,
}

/// Glorot-uniform matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.random_range(-a..a))
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[out_dim]))));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(p[self.weight]);
        match self.bias {
            Some(b) => y.add(p[b]),
            None => y,
        }
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, mut x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x);
            if i != last {
                x = x.relu();
            }
        }
        x
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<TensorRecord>,
    v: Vec<TensorRecord>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<TensorRecord> = store
            .tensors()
            .iter()
            .map(|t| TensorRecord::from(&Tensor::zeros(t.raw_dim())))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "gradient count");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for (k, (p, &g)) in param.iter_mut().zip(grads[i].iter()).enumerate() {
                let g = g + self.weight_decay * *p;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
