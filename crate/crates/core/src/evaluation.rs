//! Masked metrics, inductive inference and the ablation runner.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph_data::{NodeSplit, NormStats, SpatialTemporalGraph, TemporalSplit};
use crate::trainer::{fallback_adjacency, stacked_eval_noise, AdjacencyMode, Model, TrainConfig, TrainSummary, Trainer};

/// Targets with `|x|` below this are left out of MAPE.
pub const MAPE_MIN_TARGET: f64 = 1e-4;

/// Horizons reported by default.
pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];

fn observed<'a>(
    name: &str,
    target: &'a ArrayD<f64>,
    pred: &'a ArrayD<f64>,
    mask: Option<&'a ArrayD<bool>>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if target.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "{name}: target {:?} vs prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "{name}: mask {:?} vs target {:?}",
                m.shape(),
                target.shape()
            )));
        }
    }
    let mask_iter: Box<dyn Iterator<Item = bool> + 'a> = match mask {
        Some(m) => Box::new(m.iter().copied()),
        None => Box::new(std::iter::repeat(true)),
    };
    Ok(target
        .iter()
        .zip(pred.iter())
        .zip(mask_iter)
        .filter(|&((t, _), m)| m && t.is_finite())
        .map(|((&t, &p), _)| (t, p)))
}

fn empty(name: &str) -> Error {
    Error::Empty(format!("{name}: no observed entries"))
}

/// Mean absolute error over observed entries (mask true, finite target).
pub fn mae(target: &ArrayD<f64>, pred: &ArrayD<f64>, mask: Option<&ArrayD<bool>>) -> Result<f64> {
    let (sum, n) = observed("MAE", target, pred, mask)?.fold((0.0, 0usize), |(s, n), (t, p)| (s + (t - p).abs(), n + 1));
    if n == 0 {
        return Err(empty("MAE"));
    }
    Ok(sum / n as f64)
}

/// Root mean squared error over observed entries.
pub fn rmse(target: &ArrayD<f64>, pred: &ArrayD<f64>, mask: Option<&ArrayD<bool>>) -> Result<f64> {
    let (sum, n) = observed("RMSE", target, pred, mask)?.fold((0.0, 0usize), |(s, n), (t, p)| (s + (t - p) * (t - p), n + 1));
    if n == 0 {
        return Err(empty("RMSE"));
    }
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute percentage error as a fraction, skipping near-zero targets.
pub fn mape(target: &ArrayD<f64>, pred: &ArrayD<f64>, mask: Option<&ArrayD<bool>>) -> Result<f64> {
    let (sum, n) = observed("MAPE", target, pred, mask)?
        .filter(|(t, _)| t.abs() >= MAPE_MIN_TARGET)
        .fold((0.0, 0usize), |(s, n), (t, p)| (s + ((t - p) / t).abs(), n + 1));
    if n == 0 {
        return Err(empty("MAPE"));
    }
    Ok(sum / n as f64)
}

/// Which nodes a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeScope {
    #[default]
    TestNodes,
    All,
    TrainNodes,
}

impl fmt::Display for NodeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeScope::TestNodes => "test_nodes",
            NodeScope::All => "all",
            NodeScope::TrainNodes => "train_nodes",
        })
    }
}

impl FromStr for NodeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_nodes" => Ok(NodeScope::TestNodes),
            "all" => Ok(NodeScope::All),
            "train_nodes" => Ok(NodeScope::TrainNodes),
            other => Err(Error::Config(format!(
                "unknown node scope {other:?}; expected test_nodes, all or train_nodes"
            ))),
        }
    }
}

impl NodeScope {
    pub fn nodes(&self, split: &NodeSplit) -> Vec<usize> {
        match self {
            NodeScope::TestNodes => split.test_nodes.clone(),
            NodeScope::TrainNodes => split.train_nodes.clone(),
            NodeScope::All => {
                let mut all: Vec<usize> = split.train_nodes.iter().chain(&split.test_nodes).copied().collect();
                all.sort_unstable();
                all
            }
        }
    }
}

/// Metrics over prediction steps `1..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: f64,
    pub count: usize,
}

/// Per-horizon metrics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub node_scope: NodeScope,
    pub denormalized: bool,
    pub rows: Vec<HorizonRow>,
    /// Steps `1..=τ`.
    pub average: HorizonRow,
}

impl MetricsReport {
    pub fn row(&self, horizon: usize) -> Option<&HorizonRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }
}

/// Forecasts and ground truth over a window range, in real units.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `[W, τ, N, C]`
    pub forecast: ArrayD<f64>,
    /// `[W, τ, N, C]`
    pub target: ArrayD<f64>,
    /// First input step of each window.
    pub starts: Vec<usize>,
}

fn horizon_row(pred: &ArrayD<f64>, target: &ArrayD<f64>, nodes: &[usize], h: usize) -> Result<HorizonRow> {
    let p = pred.slice_axis(Axis(1), (0..h).into()).select(Axis(2), nodes);
    let t = target.slice_axis(Axis(1), (0..h).into()).select(Axis(2), nodes);
    let count = t.iter().filter(|v| v.is_finite()).count();
    Ok(HorizonRow {
        horizon: h,
        mae: mae(&t, &p, None)?,
        rmse: rmse(&t, &p, None)?,
        mape_pct: 100.0 * mape(&t, &p, None)?,
        count,
    })
}

/// Per-horizon metrics on `scope`; horizons longer than τ are skipped.
pub fn horizon_report(
    variant: &str,
    predictions: &Predictions,
    split: &NodeSplit,
    scope: NodeScope,
    horizons: &[usize],
) -> Result<MetricsReport> {
    let (pred, target) = (&predictions.forecast, &predictions.target);
    if pred.shape() != target.shape() || pred.ndim() != 4 {
        return Err(Error::Shape(format!(
            "predictions {:?} and targets {:?} must both be [W, τ, N, C]",
            pred.shape(),
            target.shape()
        )));
    }
    let nodes = scope.nodes(split);
    if nodes.is_empty() || pred.shape()[0] == 0 {
        return Err(Error::Empty(format!("no {scope} windows to evaluate")));
    }
    let tau = pred.shape()[1];
    let rows = horizons
        .iter()
        .filter(|&&h| h >= 1 && h <= tau)
        .map(|&h| horizon_row(pred, target, &nodes, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        variant: variant.to_string(),
        node_scope: scope,
        denormalized: true,
        rows,
        average: horizon_row(pred, target, &nodes, tau)?,
    })
}

/// Run the trained model on every window of `range` over all nodes.
///
/// Each window gets one topology sample from the evaluation stream (or the
/// mean over `inference_samples` samples). Parameters are only read.
pub fn infer(
    model: &Model,
    config: &TrainConfig,
    norm: &NormStats,
    graph: &SpatialTemporalGraph,
    range: Range<usize>,
) -> Result<Predictions> {
    let m = &config.model;
    let (kappa, tau) = (m.input_steps, m.output_steps);
    let span = kappa + tau;
    if range.end > graph.num_steps() {
        return Err(Error::Shape(format!(
            "range {range:?} exceeds {} steps",
            graph.num_steps()
        )));
    }
    if range.len() < span {
        return Err(Error::Empty(format!(
            "range of {} steps is shorter than a {span}-step window",
            range.len()
        )));
    }
    let n = graph.num_nodes;
    let c = graph.num_channels();
    let fallback;
    let known = match (&graph.adjacency, config.adjacency) {
        (Some(a), _) => Some(a),
        (None, AdjacencyMode::Dataset) => {
            fallback = fallback_adjacency(n, config.seed, config.init_threshold, config.topology_dim);
            Some(&fallback)
        }
        _ => None,
    };
    let forecaster = model.forecaster(config, known);
    let raw = graph.features.slice(s![range.clone(), .., ..]).to_owned().into_dyn();
    let normed = norm.apply(&raw)?;
    let starts: Vec<usize> = (range.start..=range.end - span).collect();
    let w = starts.len();
    let mut forecast = ArrayD::zeros(IxDyn(&[w, tau, n, c]));
    let mut target = ArrayD::zeros(IxDyn(&[w, tau, n, c]));
    let samples = config.inference_samples.max(1);
    let per_window = n * n * config.topology_hidden.max(1);
    let chunk = (4_000_000 / per_window.max(1)).clamp(1, 32);
    for first in (0..w).step_by(chunk) {
        let last = (first + chunk).min(w);
        let b = last - first;
        let mut inputs = ArrayD::zeros(IxDyn(&[b, kappa, n, c]));
        for k in 0..b {
            let off = starts[first + k] - range.start;
            inputs
                .index_axis_mut(Axis(0), k)
                .assign(&normed.slice(s![off..off + kappa, .., ..]));
            target
                .index_axis_mut(Axis(0), first + k)
                .assign(&raw.slice(s![off + kappa..off + span, .., ..]));
        }
        let mut acc = ArrayD::<f64>::zeros(IxDyn(&[b, tau, n, c]));
        for sample in 0..samples {
            let noise = if samples == 1 {
                stacked_eval_noise(config.eval_seed, first, b, n)
            } else {
                let mut diff = ArrayD::zeros(IxDyn(&[b, n, n]));
                for k in 0..b {
                    let idx = (first + k) * samples + sample;
                    diff.index_axis_mut(Axis(0), k)
                        .assign(&stacked_eval_noise(config.eval_seed, idx, 1, n).diff.index_axis(Axis(0), 0));
                }
                crate::topology::GumbelNoise { diff }
            };
            acc += &forecaster.predict(&inputs, &noise)?;
        }
        acc.mapv_inplace(|v| v / samples as f64);
        let out = norm.invert(&acc)?;
        forecast.slice_mut(s![first..last, .., .., ..]).assign(&out);
    }
    Ok(Predictions {
        forecast,
        target,
        starts,
    })
}

/// Historical-average forecasts over every window of `range`.
pub fn historical_average(graph: &SpatialTemporalGraph, input_steps: usize, output_steps: usize, range: Range<usize>) -> Result<Predictions> {
    let span = input_steps + output_steps;
    if range.len() < span || range.end > graph.num_steps() {
        return Err(Error::Empty(format!(
            "range {range:?} cannot hold a {span}-step window"
        )));
    }
    let (n, c) = (graph.num_nodes, graph.num_channels());
    let starts: Vec<usize> = (range.start..=range.end - span).collect();
    let w = starts.len();
    let mut forecast = ArrayD::zeros(IxDyn(&[w, output_steps, n, c]));
    let mut target = ArrayD::zeros(IxDyn(&[w, output_steps, n, c]));
    for (k, &t0) in starts.iter().enumerate() {
        let mean = graph
            .features
            .slice(s![t0..t0 + input_steps, .., ..])
            .mean_axis(Axis(0))
            .expect("non-empty window");
        for step in 0..output_steps {
            forecast.slice_mut(s![k, step, .., ..]).assign(&mean);
        }
        target
            .index_axis_mut(Axis(0), k)
            .assign(&graph.features.slice(s![t0 + input_steps..t0 + span, .., ..]));
    }
    Ok(Predictions {
        forecast,
        target,
        starts,
    })
}

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o aug")]
    WithoutAug,
    #[serde(rename = "w/o sim")]
    WithoutSim,
    #[serde(rename = "w/o fst")]
    WithoutFst,
    #[serde(rename = "w/o gl")]
    WithoutGl,
    #[serde(rename = "w/o gs")]
    WithoutGs,
    #[serde(rename = "identity")]
    Identity,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WithoutAug,
        Variant::WithoutSim,
        Variant::WithoutFst,
        Variant::WithoutGl,
        Variant::WithoutGs,
        Variant::Identity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutAug => "w/o aug",
            Variant::WithoutSim => "w/o sim",
            Variant::WithoutFst => "w/o fst",
            Variant::WithoutGl => "w/o gl",
            Variant::WithoutGs => "w/o gs",
            Variant::Identity => "identity",
        }
    }

    /// The configuration this variant trains with.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutAug => c.use_augmentation = false,
            Variant::WithoutSim => c.use_similarity = false,
            Variant::WithoutFst => c.use_forecastability = false,
            Variant::WithoutGl => c.adjacency = AdjacencyMode::Dataset,
            Variant::WithoutGs => c.adjacency = AdjacencyMode::Full,
            Variant::Identity => c.adjacency = AdjacencyMode::Identity,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; valid variants: {}", names.join(", ")))
            })
    }
}

/// Everything produced by one ablation run.
pub struct AblationRun {
    pub report: MetricsReport,
    pub summary: TrainSummary,
    pub checkpoint: Checkpoint,
    pub phase1_steps: usize,
}

/// Train `variant` on `split`, then evaluate on the test range.
pub fn run_ablation(
    variant: Variant,
    base: &TrainConfig,
    graph: &SpatialTemporalGraph,
    split: &NodeSplit,
    scope: NodeScope,
) -> Result<AblationRun> {
    let config = variant.apply(base);
    let mut trainer = Trainer::new(config, graph, split.clone())?;
    let summary = trainer.fit(|_, _| Ok(()))?;
    let predictions = infer(&trainer.model, &trainer.config, &trainer.norm, graph, trainer.temporal.test.clone())?;
    let report = horizon_report(variant.name(), &predictions, split, scope, &DEFAULT_HORIZONS)?;
    Ok(AblationRun {
        report,
        summary,
        checkpoint: Checkpoint::from_trainer(&trainer),
        phase1_steps: trainer.phase1_steps,
    })
}

/// Evaluate a stored checkpoint on its test range.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    graph: &SpatialTemporalGraph,
    scope: NodeScope,
    label: &str,
) -> Result<(MetricsReport, Predictions)> {
    let model = checkpoint.inference_model()?;
    let predictions = infer(
        &model,
        &checkpoint.train_config,
        &checkpoint.norm,
        graph,
        checkpoint.temporal.test.clone(),
    )?;
    let report = horizon_report(label, &predictions, &checkpoint.split, scope, &DEFAULT_HORIZONS)?;
    Ok((report, predictions))
}

/// Historical-average report on the test range of `temporal`.
pub fn ha_report(
    graph: &SpatialTemporalGraph,
    split: &NodeSplit,
    temporal: &TemporalSplit,
    input_steps: usize,
    output_steps: usize,
    scope: NodeScope,
) -> Result<MetricsReport> {
    let predictions = historical_average(graph, input_steps, output_steps, temporal.test.clone())?;
    horizon_report("ha", &predictions, split, scope, &DEFAULT_HORIZONS)
}

fn row_json(r: &HorizonRow) -> serde_json::Value {
    serde_json::json!({
        "mae": r.mae,
        "rmse": r.rmse,
        "mape_pct": r.mape_pct,
        "count": r.count,
    })
}

/// `{variant: {horizon: {mae, rmse, mape_pct, count}}}` with an `average` entry.
pub fn reports_to_json(reports: &[MetricsReport]) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for r in reports {
        let mut by_h = serde_json::Map::new();
        for row in &r.rows {
            by_h.insert(row.horizon.to_string(), row_json(row));
        }
        by_h.insert("average".into(), row_json(&r.average));
        by_h.insert("node_scope".into(), serde_json::Value::String(r.node_scope.to_string()));
        out.insert(r.variant.clone(), serde_json::Value::Object(by_h));
    }
    serde_json::Value::Object(out)
}

/// Flat CSV: `variant,horizon,mae,rmse,mape_pct,count`.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("variant,horizon,mae,rmse,mape_pct,count\n");
    for r in reports {
        for row in r.rows.iter().chain(std::iter::once(&r.average)) {
            let label = if std::ptr::eq(row, &r.average) {
                "average".to_string()
            } else {
                row.horizon.to_string()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                csv_field(&r.variant),
                label,
                row.mae,
                row.rmse,
                row.mape_pct,
                row.count
            );
        }
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Mean and population standard deviation of each metric at `horizon`
/// across reports sharing a variant name.
pub fn aggregate(reports: &[MetricsReport], horizon: usize) -> BTreeMap<String, [(f64, f64); 3]> {
    let mut groups: BTreeMap<String, Vec<&HorizonRow>> = BTreeMap::new();
    for r in reports {
        let row = r.row(horizon).unwrap_or(&r.average);
        groups.entry(r.variant.clone()).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(k, rows)| {
            let stat = |f: &dyn Fn(&HorizonRow) -> f64| {
                let n = rows.len() as f64;
                let mean = rows.iter().map(|r| f(r)).sum::<f64>() / n;
                let var = rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            };
            (k, [stat(&|r| r.mae), stat(&|r| r.rmse), stat(&|r| r.mape_pct)])
        })
        .collect()
}

/// Learned edge probabilities over all nodes for one window, for export.
pub fn score_matrix(
    model: &Model,
    config: &TrainConfig,
    norm: &NormStats,
    graph: &SpatialTemporalGraph,
    start: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let kappa = config.model.input_steps;
    if start + kappa > graph.num_steps() {
        return Err(Error::Shape(format!("window at {start} runs past the series")));
    }
    let raw = graph.features.slice(s![start..start + kappa, .., ..]).to_owned().into_dyn();
    let x = norm.apply(&raw)?.insert_axis(Axis(0));
    let g = crate::autodiff::Graph::new();
    let p = model.gf.bind_frozen(&g);
    let n = graph.num_nodes;
    let top = model.topology.topology(
        &p,
        g.constant(x),
        &config.sampler(),
        &crate::topology::GumbelNoise::zeros(&[1, n, n]),
    )?;
    let to2 = |v: crate::autodiff::Var| -> Result<Array2<f64>> {
        v.value()
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .map_err(|e| Error::Shape(e.to_string()))
    };
    Ok((to2(top.scores)?, to2(top.probs)?))
}
