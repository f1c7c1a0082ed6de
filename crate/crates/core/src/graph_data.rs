//! Dataset ingestion, normalization, windowing and inductive splits.
//!
//! A dataset directory holds `meta.json` (`T`, `N`, `C`, `name`), `data.bin`
//! (little-endian `f32`, row-major `[T, N, C]`) and an optional `adj.csv`
//! edge list with header `from,to,cost`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Node set, optional weighted adjacency and a `[T, N, C]` feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTemporalGraph {
    pub name: String,
    pub num_nodes: usize,
    pub adjacency: Option<Array2<f64>>,
    pub features: Array3<f64>,
    pub step_minutes: u32,
    /// Edge rows read from the source edge list (before symmetrization).
    pub raw_edges: usize,
}

impl SpatialTemporalGraph {
    pub fn num_steps(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_channels(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub name: String,
    #[serde(default = "default_step_minutes")]
    pub step_minutes: u32,
}

fn default_step_minutes() -> u32 {
    5
}

/// One sliding-window instance restricted to a node subset.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[κ, N_sub, C]`
    pub input: Array3<f64>,
    /// `[τ, N_sub, C]`
    pub target: Array3<f64>,
    /// Last input step; the target starts at `anchor + 1`.
    pub anchor: usize,
    pub node_ids: Vec<usize>,
}

/// Training nodes (features visible during training) and held-out nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub train_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
    pub ratio: OrderedRatio,
    pub seed: u64,
}

/// Ratio wrapper so [`NodeSplit`] can derive `Eq`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderedRatio(pub f64);

impl Eq for OrderedRatio {}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Chronological train/validation/test ranges over `[0, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Load a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SpatialTemporalGraph> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| Error::ingestion(&meta_path, e.to_string()))?;
    if meta.steps == 0 || meta.nodes == 0 || meta.channels == 0 {
        return Err(Error::Shape(format!(
            "meta.json declares an empty tensor [{}, {}, {}]",
            meta.steps, meta.nodes, meta.channels
        )));
    }

    let data_path = dir.join("data.bin");
    let bytes = read_file(&data_path)?;
    let expected = meta.steps * meta.nodes * meta.channels;
    if bytes.len() < expected * 4 {
        return Err(Error::ingestion(
            &data_path,
            format!("short file: {} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    if bytes.len() != expected * 4 {
        return Err(Error::Shape(format!(
            "data.bin holds {} values but meta.json declares [{}, {}, {}]",
            bytes.len() / 4,
            meta.steps,
            meta.nodes,
            meta.channels
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let per_step = meta.nodes * meta.channels;
        return Err(Error::Data(format!(
            "non-finite feature at [t={}, n={}, c={}]",
            i / per_step,
            (i % per_step) / meta.channels,
            i % meta.channels
        )));
    }
    let features = Array3::from_shape_vec((meta.steps, meta.nodes, meta.channels), values)
        .map_err(|e| Error::Shape(e.to_string()))?;

    let adj_path = dir.join("adj.csv");
    let (adjacency, raw_edges) = if adj_path.exists() {
        let (a, n) = read_edge_list(&adj_path, meta.nodes)?;
        (Some(a), n)
    } else {
        (None, 0)
    };

    Ok(SpatialTemporalGraph {
        name: meta.name,
        num_nodes: meta.nodes,
        adjacency,
        features,
        step_minutes: meta.step_minutes,
        raw_edges,
    })
}

#[derive(Debug, Deserialize)]
struct EdgeRow {
    from: usize,
    to: usize,
    cost: f64,
}

/// Read `from,to,cost` rows into a symmetric matrix (max of both directions).
pub fn read_edge_list(path: &Path, num_nodes: usize) -> Result<(Array2<f64>, usize)> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut adj = Array2::<f64>::zeros((num_nodes, num_nodes));
    let mut rows = 0;
    for rec in reader.deserialize::<EdgeRow>() {
        let row = rec.map_err(|e| Error::ingestion(path, e.to_string()))?;
        if row.from >= num_nodes || row.to >= num_nodes {
            return Err(Error::Shape(format!(
                "edge ({}, {}) out of range for {num_nodes} nodes",
                row.from, row.to
            )));
        }
        if !(row.cost.is_finite() && row.cost >= 0.0) {
            return Err(Error::Data(format!(
                "edge ({}, {}) has invalid weight {}",
                row.from, row.to, row.cost
            )));
        }
        let w = adj[[row.from, row.to]].max(row.cost);
        adj[[row.from, row.to]] = w;
        adj[[row.to, row.from]] = w;
        rows += 1;
    }
    Ok((adj, rows))
}

/// Write a graph in the dataset directory format.
pub fn save_dataset(graph: &SpatialTemporalGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (t, n, c) = graph.features.dim();
    let meta = DatasetMeta {
        steps: t,
        nodes: n,
        channels: c,
        name: graph.name.clone(),
        step_minutes: graph.step_minutes,
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut bytes = Vec::with_capacity(t * n * c * 4);
    for v in graph.features.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(dir.join("data.bin"), bytes)?;
    if let Some(adj) = &graph.adjacency {
        let mut out = String::from("from,to,cost\n");
        for i in 0..n {
            for j in (i + 1)..n {
                if adj[[i, j]] > 0.0 {
                    out.push_str(&format!("{i},{j},{}\n", adj[[i, j]]));
                }
            }
        }
        fs::write(dir.join("adj.csv"), out)?;
    }
    Ok(())
}

/// Fit per-channel mean/std over `nodes` × `range` (population convention).
pub fn zscore_fit(features: &Array3<f64>, nodes: &[usize], range: Range<usize>) -> Result<NormStats> {
    if nodes.is_empty() || range.is_empty() {
        return Err(Error::Empty(
            "z-score fit needs at least one node and one time step".into(),
        ));
    }
    if range.end > features.shape()[0] {
        return Err(Error::Shape(format!(
            "range {range:?} exceeds {} steps",
            features.shape()[0]
        )));
    }
    let c = features.shape()[2];
    let count = (nodes.len() * range.len()) as f64;
    let mut mean = vec![0.0; c];
    for t in range.clone() {
        for &n in nodes {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += features[[t, n, k]];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for t in range {
        for &n in nodes {
            for (k, v) in var.iter_mut().enumerate() {
                let d = features[[t, n, k]] - mean[k];
                *v += d * d;
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &ArrayD<f64>) -> Result<()> {
        let c = x.shape().last().copied().unwrap_or(0);
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "tensor has {c} channels, statistics have {}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` along the last axis.
    pub fn apply(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(x.ndim() - 1)) {
            for (k, v) in lane.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        Ok(out)
    }

    /// `x * std + mean` along the last axis.
    pub fn invert(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(x.ndim() - 1)) {
            for (k, v) in lane.iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        Ok(out)
    }
}

pub fn zscore_apply(x: &ArrayD<f64>, stats: &NormStats) -> Result<ArrayD<f64>> {
    stats.apply(x)
}

pub fn zscore_invert(x: &ArrayD<f64>, stats: &NormStats) -> Result<ArrayD<f64>> {
    stats.invert(x)
}

/// Stride-1 sliding windows inside `range`, restricted to `node_ids`.
///
/// A range shorter than `input_steps + output_steps` yields no windows; with
/// `strict` it is an error instead.
pub fn make_windows(
    features: &Array3<f64>,
    input_steps: usize,
    output_steps: usize,
    range: Range<usize>,
    node_ids: &[usize],
    strict: bool,
) -> Result<Vec<WindowSample>> {
    if input_steps == 0 || output_steps == 0 {
        return Err(Error::Config("window lengths must be at least 1".into()));
    }
    if range.end > features.shape()[0] {
        return Err(Error::Shape(format!(
            "range {range:?} exceeds {} steps",
            features.shape()[0]
        )));
    }
    check_node_ids(node_ids, features.shape()[1])?;
    let span = input_steps + output_steps;
    if range.len() < span {
        if strict {
            return Err(Error::Empty(format!(
                "range of {} steps is shorter than a {span}-step window",
                range.len()
            )));
        }
        log::warn!(
            "range {range:?} is shorter than a {span}-step window; no samples produced"
        );
        return Ok(Vec::new());
    }
    let sub = features.select(Axis(1), node_ids);
    let count = range.len() - span + 1;
    Ok((0..count)
        .map(|k| {
            let start = range.start + k;
            WindowSample {
                input: sub.slice(s![start..start + input_steps, .., ..]).to_owned(),
                target: sub
                    .slice(s![start + input_steps..start + span, .., ..])
                    .to_owned(),
                anchor: start + input_steps - 1,
                node_ids: node_ids.to_vec(),
            }
        })
        .collect())
}

fn check_node_ids(node_ids: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &id in node_ids {
        if id >= n {
            return Err(Error::Shape(format!("node id {id} out of range for {n} nodes")));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Shape(format!("duplicate node id {id}")));
        }
    }
    Ok(())
}

/// Number of nodes selected for training at `ratio`.
pub fn train_node_count(num_nodes: usize, ratio: f64) -> usize {
    // Guard against 0.1 * 30 = 3.0000000000000004.
    (((ratio * num_nodes as f64) - 1e-9).ceil() as usize).clamp(1, num_nodes)
}

fn neighbours(adj: Option<&Array2<f64>>, n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    if let Some(a) = adj {
        for i in 0..n {
            for j in 0..n {
                if i != j && (a[[i, j]] > 0.0 || a[[j, i]] > 0.0) {
                    out[i].push(j);
                }
            }
        }
    }
    out
}

/// BFS visiting order from `root` over the undirected support of `adj`,
/// expanding neighbours in ascending id. Only the root's component is visited.
pub fn bfs_order(adj: &Array2<f64>, root: usize) -> Vec<usize> {
    let n = adj.nrows();
    let nbrs = neighbours(Some(adj), n);
    let mut seen = vec![false; n];
    bfs_from(&nbrs, root, &mut seen, usize::MAX)
}

fn bfs_from(nbrs: &[Vec<usize>], root: usize, seen: &mut [bool], limit: usize) -> Vec<usize> {
    let mut order = Vec::new();
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(v) = queue.pop_front() {
        order.push(v);
        if order.len() >= limit {
            break;
        }
        for &u in &nbrs[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    order
}

/// Seeded BFS node split.
///
/// Starts from a random root, takes nodes in BFS order until
/// `⌈ratio·N⌉` are selected, and restarts from a fresh random unvisited root
/// whenever a component is exhausted. Without an adjacency every node is its
/// own component, which reduces to seeded uniform sampling.
pub fn split_nodes_bfs(
    adj: Option<&Array2<f64>>,
    num_nodes: usize,
    ratio: f64,
    seed: u64,
) -> Result<NodeSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("node ratio {ratio} outside (0, 1]")));
    }
    if let Some(a) = adj {
        if a.nrows() != num_nodes || a.ncols() != num_nodes {
            return Err(Error::Shape(format!(
                "adjacency {:?} does not match {num_nodes} nodes",
                a.dim()
            )));
        }
    }
    let target = train_node_count(num_nodes, ratio);
    let nbrs = neighbours(adj, num_nodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = vec![false; num_nodes];
    let mut picked = Vec::with_capacity(target);
    while picked.len() < target {
        let unvisited: Vec<usize> = (0..num_nodes).filter(|&v| !seen[v]).collect();
        let root = *unvisited.choose(&mut rng).expect("nodes remain");
        picked.extend(bfs_from(&nbrs, root, &mut seen, target - picked.len()));
    }
    let mut train_nodes = picked;
    train_nodes.sort_unstable();
    let mut is_train = vec![false; num_nodes];
    for &v in &train_nodes {
        is_train[v] = true;
    }
    let test_nodes = (0..num_nodes).filter(|&v| !is_train[v]).collect();
    Ok(NodeSplit {
        train_nodes,
        test_nodes,
        ratio: OrderedRatio(ratio),
        seed,
    })
}

/// Chronological split at `⌊f₀T⌋` and `⌊(f₀+f₁)T⌋`.
///
/// `window_len` is only used to warn when the test range cannot hold a few
/// windows.
pub fn temporal_split(steps: usize, fractions: (f64, f64, f64), window_len: usize) -> Result<TemporalSplit> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Config(format!(
            "temporal fractions must all be positive, got {fractions:?}"
        )));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "temporal fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    let t = steps as f64;
    let b1 = ((a * t) + 1e-9).floor() as usize;
    let b2 = (((a + b) * t) + 1e-9).floor() as usize;
    if steps < 3 * window_len {
        log::warn!("{steps} steps is fewer than three {window_len}-step windows");
    }
    Ok(TemporalSplit {
        train: 0..b1.min(steps),
        val: b1.min(steps)..b2.min(steps),
        test: b2.min(steps)..steps,
    })
}

/// How the synthetic node graph is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    /// Points in the unit square, edge iff distance < radius (mean degree ≈ 4).
    RandomGeometric,
    /// No edges at all.
    Isolated,
}

/// How node signals are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Per-node mixture of two sinusoids with integer periods, mixed with
    /// neighbours by one diffusion step.
    SinusoidMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_graph_kind")]
    pub graph: GraphKind,
    #[serde(default = "default_signal_kind")]
    pub signal: SignalKind,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_graph_kind() -> GraphKind {
    GraphKind::RandomGeometric
}

fn default_signal_kind() -> SignalKind {
    SignalKind::SinusoidMixture
}

fn default_noise() -> f64 {
    0.05
}

impl SynthConfig {
    pub fn new(nodes: usize, steps: usize, seed: u64) -> Self {
        SynthConfig {
            nodes,
            steps,
            seed,
            graph: GraphKind::RandomGeometric,
            signal: SignalKind::SinusoidMixture,
            noise_std: 0.05,
        }
    }
}

/// Radius giving an expected degree of about four for `n` uniform points.
fn geometric_radius(n: usize) -> f64 {
    (4.0 / ((n as f64 - 1.0) * PI)).sqrt()
}

/// Seeded desk-scale stand-in for a traffic sensor network.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SpatialTemporalGraph> {
    if cfg.nodes < 2 {
        return Err(Error::Config("synthetic graph needs at least 2 nodes".into()));
    }
    if cfg.steps < 48 {
        return Err(Error::Config("synthetic series needs at least 48 steps".into()));
    }
    let n = cfg.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut adj = Array2::<f64>::zeros((n, n));
    if cfg.graph == GraphKind::RandomGeometric {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let r = geometric_radius(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                if d < r {
                    adj[[i, j]] = 1.0;
                    adj[[j, i]] = 1.0;
                }
            }
        }
    }

    // Row-normalized propagation; isolated nodes propagate their own signal.
    let mut prop = adj.clone();
    for i in 0..n {
        let deg: f64 = prop.row(i).sum();
        if deg > 0.0 {
            prop.row_mut(i).mapv_inplace(|v| v / deg);
        } else {
            prop[[i, i]] = 1.0;
        }
    }

    // Nodes differ only in frequency and phase; level and amplitudes are
    // shared so values stay positive like traffic counts.
    const LEVEL: f64 = 4.0;
    const AMP: [f64; 2] = [1.0, 0.5];
    struct Wave {
        period: [f64; 2],
        phase: [f64; 2],
    }
    let waves: Vec<Wave> = (0..n)
        .map(|_| Wave {
            period: [
                rng.random_range(16..=48) as f64,
                rng.random_range(6..=16) as f64,
            ],
            phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let mut features = Array3::<f64>::zeros((cfg.steps, n, 1));
    let mut own = vec![0.0; n];
    for t in 0..cfg.steps {
        for (i, w) in waves.iter().enumerate() {
            own[i] = LEVEL
                + (0..2)
                    .map(|k| AMP[k] * (2.0 * PI * t as f64 / w.period[k] + w.phase[k]).sin())
                    .sum::<f64>();
        }
        for i in 0..n {
            let mixed: f64 = (0..n).map(|j| prop[[i, j]] * own[j]).sum();
            let mut x = 0.7 * own[i] + 0.3 * mixed;
            if cfg.noise_std > 0.0 {
                x += noise.sample(&mut rng);
            }
            features[[t, i, 0]] = x;
        }
    }

    let raw_edges = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| adj[[i, j]] > 0.0)
        .count();
    Ok(SpatialTemporalGraph {
        name: format!("synthetic-{n}-{}-{}", cfg.steps, cfg.seed),
        num_nodes: n,
        adjacency: Some(adj),
        features,
        step_minutes: 5,
        raw_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    fn path_graph(n: usize) -> Array2<f64> {
        let mut a = Array2::zeros((n, n));
        for i in 0..n - 1 {
            a[[i, i + 1]] = 1.0;
            a[[i + 1, i]] = 1.0;
        }
        a
    }

    #[test]
    fn load_round_trip_and_symmetrization() {
        let dir = tempfile::tempdir().unwrap();
        let meta = r#"{"T": 10, "N": 3, "C": 1, "name": "tiny"}"#;
        fs::write(dir.path().join("meta.json"), meta).unwrap();
        let bytes: Vec<u8> = (0..30).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(dir.path().join("data.bin"), bytes).unwrap();
        fs::write(dir.path().join("adj.csv"), "from,to,cost\n0,1,2.0\n").unwrap();
        let g = load_dataset(dir.path()).unwrap();
        assert_eq!(g.features.dim(), (10, 3, 1));
        assert_eq!(g.features[[3, 2, 0]], 11.0);
        let a = g.adjacency.unwrap();
        assert_eq!(a[[0, 1]], 2.0);
        assert_eq!(a[[1, 0]], 2.0);
        assert_eq!(g.raw_edges, 1);
    }

    #[test]
    fn symmetrization_takes_the_larger_direction() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adj.csv");
        fs::write(&p, "from,to,cost\n0,1,2.0\n1,0,5.0\n").unwrap();
        let (a, rows) = read_edge_list(&p, 2).unwrap();
        assert_eq!(a, array![[0.0, 5.0], [5.0, 0.0]]);
        assert_eq!(rows, 2);
    }

    #[test]
    fn load_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("meta.json"), "{err}");

        fs::write(
            dir.path().join("meta.json"),
            r#"{"T": 2, "N": 2, "C": 1, "name": "x"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("data.bin"), [0u8; 8]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data.bin") && err.contains("short"), "{err}");

        let mut bytes: Vec<u8> = [1.0f32, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(dir.path().join("data.bin"), bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("t=1, n=1"), "{err}");

        fs::write(dir.path().join("data.bin"), [0u8; 20]).unwrap();
        assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn zscore_examples() {
        let x = Array3::from_elem((4, 2, 1), 5.0);
        let s = zscore_fit(&x, &[0, 1], 0..4).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.std, vec![STD_FLOOR]);

        let x = Array3::from_shape_vec((2, 1, 1), vec![1.0, 3.0]).unwrap();
        let s = zscore_fit(&x, &[0], 0..2).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
        let z = s.apply(&array![3.0].into_dyn()).unwrap();
        assert_eq!(z[[0]], 1.0);
        let z = s.apply(&array![2.0, 2.0].into_shape_with_order((2, 1)).unwrap().into_dyn()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        assert!(zscore_fit(&x, &[], 0..2).is_err());
        assert!(zscore_fit(&x, &[0], 1..1).is_err());
        assert!(s.apply(&Array3::<f64>::zeros((1, 1, 2)).into_dyn()).is_err());
    }

    #[test]
    fn zscore_ignores_test_nodes_and_future_steps() {
        let mut x = Array3::from_shape_fn((10, 3, 1), |(t, n, _)| (t * 3 + n) as f64);
        let before = zscore_fit(&x, &[0, 2], 0..6).unwrap();
        x[[2, 1, 0]] = 1e6;
        x[[8, 0, 0]] = -1e6;
        let after = zscore_fit(&x, &[0, 2], 0..6).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn window_examples() {
        let x = Array3::from_shape_fn((30, 2, 1), |(t, n, _)| (t * 10 + n) as f64);
        assert_eq!(make_windows(&x, 12, 12, 0..24, &[0, 1], true).unwrap().len(), 1);
        let w = make_windows(&x, 12, 12, 2..28, &[1], true).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().map(|s| s.anchor).collect::<Vec<_>>(), vec![13, 14, 15]);
        assert_eq!(w[0].input[[11, 0, 0]], 131.0);
        assert_eq!(w[0].target[[0, 0, 0]], 141.0);

        let ab = Array3::from_shape_vec((2, 1, 1), vec![7.0, 9.0]).unwrap();
        let w = make_windows(&ab, 1, 1, 0..2, &[0], true).unwrap();
        assert_eq!((w[0].input[[0, 0, 0]], w[0].target[[0, 0, 0]]), (7.0, 9.0));

        assert!(make_windows(&x, 12, 12, 0..20, &[0], true).is_err());
        assert!(make_windows(&x, 12, 12, 0..20, &[0], false).unwrap().is_empty());
        assert!(make_windows(&x, 1, 1, 0..5, &[0, 0], true).is_err());
        assert!(make_windows(&x, 1, 1, 0..5, &[2], true).is_err());
    }

    #[test]
    fn bfs_on_a_path_from_zero() {
        let a = path_graph(10);
        let order = bfs_order(&a, 0);
        assert_eq!(&order[..3], &[0, 1, 2]);
        assert_eq!(train_node_count(10, 0.3), 3);
    }

    #[test]
    fn bfs_split_examples() {
        let a = path_graph(10);
        let full = split_nodes_bfs(Some(&a), 10, 1.0, 3).unwrap();
        assert_eq!(full.train_nodes, (0..10).collect::<Vec<_>>());
        assert!(full.test_nodes.is_empty());
        assert!(split_nodes_bfs(Some(&a), 10, 0.0, 0).is_err());
        assert!(split_nodes_bfs(Some(&a), 10, 1.5, 0).is_err());
        assert_eq!(train_node_count(30, 0.1), 3);
    }

    #[test]
    fn bfs_prefix_of_a_connected_graph_is_connected() {
        let g = synth_generate(&SynthConfig::new(40, 48, 4)).unwrap();
        let a = g.adjacency.unwrap();
        // Keep the largest component so the graph under test is connected.
        let comp = (0..40)
            .map(|r| bfs_order(&a, r))
            .max_by_key(|c| c.len())
            .unwrap();
        let mut sub = Array2::zeros((comp.len(), comp.len()));
        for (i, &u) in comp.iter().enumerate() {
            for (j, &v) in comp.iter().enumerate() {
                sub[[i, j]] = a[[u, v]];
            }
        }
        let n = comp.len();
        for seed in 0..10 {
            let split = split_nodes_bfs(Some(&sub), n, 0.5, seed).unwrap();
            let nodes = &split.train_nodes;
            let mut induced = Array2::zeros((nodes.len(), nodes.len()));
            for (i, &u) in nodes.iter().enumerate() {
                for (j, &v) in nodes.iter().enumerate() {
                    induced[[i, j]] = sub[[u, v]];
                }
            }
            assert_eq!(bfs_order(&induced, 0).len(), nodes.len(), "seed {seed}");
        }
    }

    #[test]
    fn temporal_split_examples() {
        let s = temporal_split(100, (0.7, 0.2, 0.1), 24).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..70, 70..90, 90..100));
        let s = temporal_split(10, (0.7, 0.2, 0.1), 2).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..7, 7..9, 9..10));
        assert!(temporal_split(100, (1.0, 0.0, 0.0), 24).is_err());
        assert!(temporal_split(100, (0.5, 0.2, 0.1), 24).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_generate(&SynthConfig::new(30, 2000, 0)).unwrap();
        let b = synth_generate(&SynthConfig::new(30, 2000, 0)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig::new(30, 2000, 1)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn isolated_noise_free_node_is_periodic() {
        let cfg = SynthConfig {
            graph: GraphKind::Isolated,
            noise_std: 0.0,
            ..SynthConfig::new(2, 2000, 5)
        };
        let g = synth_generate(&cfg).unwrap();
        // Both periods are integers, so their product is a period.
        for node in 0..2 {
            let x = g.features.slice(s![.., node, 0]);
            let period = (1usize..=48 * 16)
                .find(|&p| (0..(2000 - p)).all(|t| (x[t] - x[t + p]).abs() < 1e-9))
                .expect("series is periodic");
            assert!(period >= 6);
        }
    }

    #[test]
    fn synthetic_mean_degree_is_moderate() {
        for seed in 0..10 {
            let g = synth_generate(&SynthConfig::new(30, 48, seed)).unwrap();
            let a = g.adjacency.unwrap();
            let mean_deg = a.iter().filter(|&&w| w > 0.0).count() as f64 / 30.0;
            assert!((2.0..=8.0).contains(&mean_deg), "seed {seed}: {mean_deg}");
        }
    }

    proptest! {
        #[test]
        fn window_count_formula(len in 2usize..60, k in 1usize..12, t in 1usize..12) {
            prop_assume!(len >= k + t);
            let x = Array3::<f64>::zeros((len + 3, 2, 1));
            let w = make_windows(&x, k, t, 3..3 + len, &[0, 1], true).unwrap();
            prop_assert_eq!(w.len(), len - (k + t) + 1);
        }

        #[test]
        fn node_split_partitions(n in 2usize..40, ratio in 0.01f64..=1.0, seed in 0u64..1000, density in 0.0f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut a = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < density {
                        a[[i, j]] = 1.0;
                    }
                }
            }
            let s1 = split_nodes_bfs(Some(&a), n, ratio, seed).unwrap();
            let s2 = split_nodes_bfs(Some(&a), n, ratio, seed).unwrap();
            prop_assert_eq!(&s1, &s2);
            prop_assert_eq!(s1.train_nodes.len(), train_node_count(n, ratio));
            let mut all: Vec<usize> = s1.train_nodes.iter().chain(&s1.test_nodes).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn zscore_round_trip(vals in proptest::collection::vec(-1e4f64..1e4, 12), mean in -50f64..50.0, std in 0.01f64..100.0) {
            let stats = NormStats { mean: vec![mean, -mean], std: vec![std, std * 2.0] };
            let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[6, 2]), vals).unwrap();
            let back = stats.invert(&stats.apply(&x).unwrap()).unwrap();
            for (a, b) in x.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }
}
