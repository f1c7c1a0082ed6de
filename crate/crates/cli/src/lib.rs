//! The `stfit` command-line tool: dataset conversion, training, evaluation,
//! ablations, sweeps and plots over a directory-based experiment store.

pub mod config;
pub mod convert;
pub mod plot;
pub mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stfit::evaluation::{
    evaluate_checkpoint, ha_report, horizon_report, infer, reports_to_csv, reports_to_json, run_ablation,
    NodeScope, Variant, DEFAULT_HORIZONS,
};
use stfit::graph_data::split_nodes_bfs;
use stfit::{Checkpoint, EpochRecord, MetricsReport, NodeSplit, SpatialTemporalGraph, TrainConfig, Trainer};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::convert::{ConvertOptions, EdgeWeights};
use crate::plot::Series;
use crate::store::{experiment_id, store_root, unix_now, ExperimentDir, ExperimentRecord, JsonLines, Timing};

/// Failure split by exit code: 1 for validation, 2 for runtime.
#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn validation(msg: impl fmt::Display) -> Self {
        CliError::Validation(anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError::Runtime(anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<stfit::Error> for CliError {
    fn from(e: stfit::Error) -> Self {
        match e {
            stfit::Error::Config(_) => CliError::Validation(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<stfit::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => CliError::Runtime(e),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stfit", version, about = "Inductive spatio-temporal forecasting experiments")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed (and the seed list of ablate/sweep).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `synthetic` or a dataset directory.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// Store root; takes precedence over STFIT_HOME.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Zero wall-clock fields in metric streams and move timings aside.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Ratio,
    Lambda,
    Epsilon,
}

impl SweepAxis {
    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            SweepAxis::Ratio => vec![0.05, 0.10, 0.25, 0.50, 0.75, 1.00],
            SweepAxis::Lambda => vec![0.1, 0.2, 0.3, 0.4, 0.5],
            SweepAxis::Epsilon => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Ratio => "ratio",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Epsilon => "epsilon",
        }
    }

    fn check(&self, v: f64) -> CliResult<()> {
        let ok = match self {
            SweepAxis::Ratio => v > 0.0 && v <= 1.0,
            SweepAxis::Lambda => v > 0.0 && v <= 0.5,
            SweepAxis::Epsilon => (0.0..=1.0).contains(&v),
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::validation(format!("{} value {v} is out of range", self.name())))
        }
    }

    pub fn apply(&self, cfg: &mut TrainConfig, v: f64) {
        match self {
            SweepAxis::Ratio => cfg.ratio = v,
            SweepAxis::Lambda => cfg.lambda = v,
            SweepAxis::Epsilon => cfg.epsilon = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Training loss terms per epoch.
    Loss,
    /// Sweep metrics against the swept value.
    Sweep,
    /// MAE per horizon and variant.
    Metrics,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a PEMS distribution (npz + distance CSV) into a dataset directory.
    Convert {
        /// Directory holding the `.npz` series and optional distance CSV.
        source: PathBuf,
        /// Output dataset directory.
        dest: PathBuf,
        /// Channels to keep (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "0")]
        channels: Vec<usize>,
        #[arg(long, value_enum, default_value_t = EdgeWeights::Gaussian)]
        weights: EdgeWeights,
        /// Dataset name; the source directory name by default.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train one model and evaluate it on the test range.
    Train {
        /// Fraction of nodes whose series are visible during training.
        #[arg(long)]
        ratio: Option<f64>,
        /// Overrides `train.max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate an experiment id or a checkpoint file.
    Evaluate {
        /// Experiment id from the store, or a path to a checkpoint file.
        target: String,
        /// `test_nodes`, `all` or `train_nodes`.
        #[arg(long)]
        node_scope: Option<String>,
    },
    /// Train and evaluate a list of ablation variants on shared splits.
    Ablate {
        /// Comma-separated variant names; all variants by default.
        #[arg(long)]
        variants: Option<String>,
        /// Overrides `train.max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the full model over a grid of one hyperparameter.
    Sweep {
        /// Hyperparameter to vary.
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values; the axis default grid otherwise.
        #[arg(long)]
        values: Option<String>,
        /// Overrides `train.max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render SVG charts for stored experiments.
    Plot {
        /// Experiment ids to draw.
        #[arg(required = true)]
        ids: Vec<String>,
        #[arg(long, value_enum)]
        kind: PlotKind,
    },
}

/// Resolved global options.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub deterministic: bool,
    pub dataset_flag: bool,
}

impl RunContext {
    pub fn from_cli(cli: &Cli) -> CliResult<Self> {
        if cli.device != "cpu" {
            return Err(CliError::validation(format!(
                "device {:?} is not available; only \"cpu\" is supported",
                cli.device
            )));
        }
        let mut config = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.train.seed = seed;
            config.seeds = vec![seed];
        }
        if let Some(d) = &cli.dataset {
            config.dataset = DatasetConfig::from_flag(d, &config.dataset);
        }
        config.validate()?;
        Ok(RunContext {
            config,
            root: store_root(cli.out.as_deref()),
            deterministic: cli.deterministic,
            dataset_flag: cli.dataset.is_some(),
        })
    }
}

/// What a command produced, for printing.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub message: String,
    pub dir: Option<PathBuf>,
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let ctx = RunContext::from_cli(cli)?;
    match &cli.command {
        Command::Convert {
            source,
            dest,
            channels,
            weights,
            name,
        } => cmd_convert(source, dest, channels, *weights, name.clone()),
        Command::Train { ratio, epochs } => cmd_train(&ctx, *ratio, *epochs),
        Command::Evaluate { target, node_scope } => cmd_evaluate(&ctx, target, node_scope.as_deref()),
        Command::Ablate { variants, epochs } => cmd_ablate(&ctx, variants.as_deref(), *epochs),
        Command::Sweep { axis, values, epochs } => cmd_sweep(&ctx, *axis, values.as_deref(), *epochs),
        Command::Plot { ids, kind } => cmd_plot(&ctx, ids, *kind),
    }
}

fn cmd_convert(
    source: &Path,
    dest: &Path,
    channels: &[usize],
    weights: EdgeWeights,
    name: Option<String>,
) -> CliResult<Outcome> {
    let opts = ConvertOptions {
        channels: channels.to_vec(),
        weights,
        name,
        ..ConvertOptions::default()
    };
    let s = convert::convert(source, dest, &opts)?;
    let edges = s.edges.map_or("absent".to_string(), |e| e.to_string());
    Ok(Outcome {
        message: format!(
            "{}: N={} T={} C={} edges={edges}\nwritten to {}",
            s.name,
            s.nodes,
            s.steps,
            s.channels,
            dest.display()
        ),
        dir: Some(dest.to_path_buf()),
    })
}

fn apply_overrides(cfg: &mut ExperimentConfig, ratio: Option<f64>, epochs: Option<usize>) -> CliResult<()> {
    if let Some(r) = ratio {
        cfg.train.ratio = r;
    }
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
        cfg.train.patience = cfg.train.patience.min(e.max(1));
    }
    cfg.validate()
}

/// Test nodes, or every node when the split leaves none out.
fn effective_scope(scope: NodeScope, split: &NodeSplit) -> NodeScope {
    if scope == NodeScope::TestNodes && split.test_nodes.is_empty() {
        log::warn!("all nodes are training nodes; reporting over all nodes");
        NodeScope::All
    } else {
        scope
    }
}

fn split_for(graph: &SpatialTemporalGraph, ratio: f64, seed: u64) -> CliResult<NodeSplit> {
    Ok(split_nodes_bfs(graph.adjacency.as_ref(), graph.num_nodes, ratio, seed)?)
}

#[derive(Serialize)]
struct EpochTiming {
    epoch: usize,
    wall_seconds: f64,
}

/// Write an epoch stream, moving wall-clock values aside in deterministic mode.
fn write_epochs(dir: &ExperimentDir, prefix: &str, records: &[EpochRecord], deterministic: bool) -> anyhow::Result<()> {
    let mut metrics = JsonLines::create(&dir.file(&format!("{prefix}metrics.jsonl")))?;
    let mut timings = if deterministic {
        Some(JsonLines::create(&dir.file(&format!("{prefix}timings.jsonl")))?)
    } else {
        None
    };
    for r in records {
        let mut r = r.clone();
        if let Some(t) = timings.as_mut() {
            t.push(&EpochTiming {
                epoch: r.epoch,
                wall_seconds: r.wall_seconds,
            })?;
            r.wall_seconds = 0.0;
        }
        metrics.push(&r)?;
    }
    Ok(())
}

fn finish_record(
    dir: &ExperimentDir,
    mut record: ExperimentRecord,
    started: (u64, Instant),
    deterministic: bool,
) -> anyhow::Result<ExperimentRecord> {
    let timing = Timing {
        started_unix: started.0,
        finished_unix: unix_now(),
        wall_seconds: started.1.elapsed().as_secs_f64(),
    };
    if deterministic {
        dir.write_json("timings.json", &timing)?;
    } else {
        record.timing = Some(timing);
    }
    dir.write_json("record.json", &record)?;
    Ok(record)
}

fn format_report(r: &MetricsReport) -> String {
    let mut s = format!("{} ({})\n  horizon      MAE     RMSE   MAPE%\n", r.variant, r.node_scope);
    for row in &r.rows {
        s.push_str(&format!("  {:>7} {:8.4} {:8.4} {:7.2}\n", row.horizon, row.mae, row.rmse, row.mape_pct));
    }
    s.push_str(&format!(
        "  {:>7} {:8.4} {:8.4} {:7.2}\n",
        "average", r.average.mae, r.average.rmse, r.average.mape_pct
    ));
    s
}

fn write_reports(dir: &ExperimentDir, reports: &[MetricsReport]) -> anyhow::Result<()> {
    dir.write_json("report.json", &reports_to_json(reports))?;
    dir.write("report.csv", reports_to_csv(reports))
}

fn cmd_train(ctx: &RunContext, ratio: Option<f64>, epochs: Option<usize>) -> CliResult<Outcome> {
    let started = (unix_now(), Instant::now());
    let mut cfg = ctx.config.clone();
    apply_overrides(&mut cfg, ratio, epochs)?;
    let graph = cfg.dataset.load()?;
    let label = cfg.dataset.label();
    let id = experiment_id("train", &cfg, &label, &serde_json::Value::Null);
    let dir = ExperimentDir::create(&ctx.root, &id)?;
    dir.write("config.toml", cfg.to_toml())?;

    let split = split_for(&graph, cfg.train.ratio, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &graph, split.clone())?;
    log::info!(
        "training on {} of {} nodes ({} virtual)",
        trainer.num_train_nodes(),
        graph.num_nodes,
        trainer.num_virtual()
    );
    let summary = trainer.fit(|_, r| {
        log::info!("epoch {} val_mae {:.4}", r.epoch, r.val_mae);
        Ok(())
    })?;
    write_epochs(&dir, "", &summary.records, ctx.deterministic)?;
    Checkpoint::from_trainer(&trainer).save(dir.file("checkpoint.json"))?;

    let scope = effective_scope(cfg.node_scope, &split);
    let predictions = infer(&trainer.model, &trainer.config, &trainer.norm, &graph, trainer.temporal.test.clone())?;
    let report = horizon_report("model", &predictions, &split, scope, &DEFAULT_HORIZONS)?;
    write_reports(&dir, std::slice::from_ref(&report))?;

    let record = ExperimentRecord {
        id: id.clone(),
        command: "train".into(),
        dataset: label,
        code_version: store::CODE_VERSION.into(),
        config: cfg.clone(),
        seeds: vec![cfg.train.seed],
        splits: vec![split],
        metrics_file: Some("metrics.jsonl".into()),
        reports: vec![report.clone()],
        timing: None,
    };
    finish_record(&dir, record, started, ctx.deterministic)?;
    Ok(Outcome {
        message: format!(
            "experiment {id}\nepochs run: {} (best epoch {}, val MAE {:.4})\n{}",
            summary.records.len(),
            summary.best_epoch,
            summary.best_val_mae,
            format_report(&report)
        ),
        dir: Some(dir.path),
    })
}

fn cmd_evaluate(ctx: &RunContext, target: &str, scope_flag: Option<&str>) -> CliResult<Outcome> {
    let as_path = Path::new(target);
    let (ckpt_path, dir) = if as_path.is_file() {
        let parent = as_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (
            as_path.to_path_buf(),
            ExperimentDir {
                id: target.to_string(),
                path: parent.to_path_buf(),
            },
        )
    } else {
        let dir = ExperimentDir::open(&ctx.root, target)
            .filter(|d| d.file("checkpoint.json").is_file())
            .ok_or_else(|| CliError::runtime(format!("no checkpoint found for {target:?}")))?;
        (dir.file("checkpoint.json"), dir)
    };
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let stored = dir.file("config.toml");
    let run_cfg = if stored.is_file() {
        Some(ExperimentConfig::load(&stored)?)
    } else {
        None
    };
    let dataset = match (&run_cfg, ctx.dataset_flag) {
        (Some(c), false) => c.dataset.clone(),
        _ => ctx.config.dataset.clone(),
    };
    let graph = dataset.load()?;
    let max_node = checkpoint
        .split
        .train_nodes
        .iter()
        .chain(&checkpoint.split.test_nodes)
        .max()
        .copied()
        .unwrap_or(0);
    if max_node >= graph.num_nodes {
        return Err(CliError::validation(format!(
            "checkpoint refers to node {max_node} but the dataset has {} nodes",
            graph.num_nodes
        )));
    }
    let scope = match scope_flag {
        Some(s) => s.parse::<NodeScope>()?,
        None => run_cfg.as_ref().map_or(ctx.config.node_scope, |c| c.node_scope),
    };
    let scope = effective_scope(scope, &checkpoint.split);
    let (report, _) = evaluate_checkpoint(&checkpoint, &graph, scope, "model")?;
    write_reports(&dir, std::slice::from_ref(&report))?;
    Ok(Outcome {
        message: format_report(&report),
        dir: Some(dir.path),
    })
}

fn parse_variants(list: Option<&str>) -> CliResult<Vec<Variant>> {
    let Some(list) = list else {
        return Ok(Variant::ALL.to_vec());
    };
    let vs = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    if vs.is_empty() {
        return Err(CliError::validation("variant list is empty"));
    }
    Ok(vs)
}

fn slug(name: &str) -> String {
    name.replace("w/o ", "wo-").replace([' ', '/'], "-")
}

/// Metrics at horizon 12, or over the whole output when it is shorter.
fn headline(r: &MetricsReport) -> [f64; 3] {
    let row = r.row(12).unwrap_or(&r.average);
    [row.mae, row.rmse, row.mape_pct]
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn seeded_csv(per_seed: &[(u64, Vec<MetricsReport>)]) -> String {
    let mut out = String::from("seed,variant,horizon,mae,rmse,mape_pct,count\n");
    for (seed, reports) in per_seed {
        for line in reports_to_csv(reports).lines().skip(1) {
            out.push_str(&format!("{seed},{line}\n"));
        }
    }
    out
}

fn cmd_ablate(ctx: &RunContext, variants: Option<&str>, epochs: Option<usize>) -> CliResult<Outcome> {
    let started = (unix_now(), Instant::now());
    let variants = parse_variants(variants)?;
    let mut cfg = ctx.config.clone();
    apply_overrides(&mut cfg, None, epochs)?;
    let graph = cfg.dataset.load()?;
    let label = cfg.dataset.label();
    let names: Vec<&str> = variants.iter().map(|v| v.name()).collect();
    let id = experiment_id("ablate", &cfg, &label, &serde_json::json!(names));
    let dir = ExperimentDir::create(&ctx.root, &id)?;
    dir.write("config.toml", cfg.to_toml())?;

    let mut per_seed = Vec::new();
    let mut baselines = Vec::new();
    let mut splits = Vec::new();
    let mut all_reports = Vec::new();
    for &seed in &cfg.seeds {
        let split = split_for(&graph, cfg.train.ratio, seed)?;
        let scope = effective_scope(cfg.node_scope, &split);
        let base = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let mut reports = Vec::new();
        let mut temporal = None;
        for &v in &variants {
            log::info!("seed {seed}: training {v}");
            let run = run_ablation(v, &base, &graph, &split, scope)?;
            let sub = format!("runs/{}-seed{seed}/", slug(v.name()));
            write_epochs(&dir, &sub, &run.summary.records, ctx.deterministic)?;
            run.checkpoint.save(dir.file(&format!("{sub}checkpoint.json")))?;
            temporal = Some(run.checkpoint.temporal.clone());
            reports.push(run.report);
        }
        let temporal = temporal.expect("at least one variant");
        let m = &base.model;
        let ha = ha_report(&graph, &split, &temporal, m.input_steps, m.output_steps, scope)?;
        baselines.push((seed, ha));
        all_reports.extend(reports.iter().cloned());
        per_seed.push((seed, reports));
        splits.push(split);
    }

    let mut summary = String::from("variant,mae,rmse,mape_pct\n");
    let mut table = String::from("variant        MAE      RMSE    MAPE%   (horizon 12, mean over seeds)\n");
    let mut mean_json = serde_json::Map::new();
    let rows: Vec<(String, Vec<[f64; 3]>)> = variants
        .iter()
        .map(|v| {
            let vals = per_seed
                .iter()
                .map(|(_, rs)| headline(rs.iter().find(|r| r.variant == v.name()).expect("variant report")))
                .collect();
            (v.name().to_string(), vals)
        })
        .chain(std::iter::once((
            "ha".to_string(),
            baselines.iter().map(|(_, r)| headline(r)).collect(),
        )))
        .collect();
    for (name, vals) in &rows {
        let stats: Vec<(f64, f64)> = (0..3).map(|k| mean_std(&vals.iter().map(|v| v[k]).collect::<Vec<_>>())).collect();
        if name != "ha" {
            summary.push_str(&format!("{},{},{},{}\n", name, stats[0].0, stats[1].0, stats[2].0));
        }
        table.push_str(&format!(
            "{:<10} {:8.4} {:9.4} {:8.2}\n",
            name, stats[0].0, stats[1].0, stats[2].0
        ));
        mean_json.insert(
            name.clone(),
            serde_json::json!({
                "mae": {"mean": stats[0].0, "std": stats[0].1},
                "rmse": {"mean": stats[1].0, "std": stats[1].1},
                "mape_pct": {"mean": stats[2].0, "std": stats[2].1},
            }),
        );
    }
    dir.write("summary.csv", &summary)?;
    let seeds_json: BTreeMap<String, serde_json::Value> = per_seed
        .iter()
        .map(|(s, rs)| (s.to_string(), reports_to_json(rs)))
        .collect();
    let ha_json: BTreeMap<String, serde_json::Value> = baselines
        .iter()
        .map(|(s, r)| (s.to_string(), reports_to_json(std::slice::from_ref(r))))
        .collect();
    dir.write_json(
        "report.json",
        &serde_json::json!({"seeds": seeds_json, "baselines": ha_json, "summary": mean_json}),
    )?;
    let mut with_ha = per_seed.clone();
    for ((_, rs), (_, ha)) in with_ha.iter_mut().zip(&baselines) {
        rs.push(ha.clone());
    }
    dir.write("report.csv", seeded_csv(&with_ha))?;

    let record = ExperimentRecord {
        id: id.clone(),
        command: "ablate".into(),
        dataset: label,
        code_version: store::CODE_VERSION.into(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        splits,
        metrics_file: None,
        reports: all_reports,
        timing: None,
    };
    finish_record(&dir, record, started, ctx.deterministic)?;
    Ok(Outcome {
        message: format!("experiment {id}\n{table}"),
        dir: Some(dir.path),
    })
}

fn parse_values(axis: SweepAxis, values: Option<&str>) -> CliResult<Vec<f64>> {
    let vals = match values {
        None => axis.default_grid(),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| CliError::validation(format!("bad {} value {t:?}", axis.name())))
            })
            .collect::<CliResult<Vec<_>>>()?,
    };
    if vals.is_empty() {
        return Err(CliError::validation("sweep values must not be empty"));
    }
    for &v in &vals {
        axis.check(v)?;
    }
    Ok(vals)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: f64,
}

fn cmd_sweep(ctx: &RunContext, axis: SweepAxis, values: Option<&str>, epochs: Option<usize>) -> CliResult<Outcome> {
    let started = (unix_now(), Instant::now());
    let values = parse_values(axis, values)?;
    let mut cfg = ctx.config.clone();
    apply_overrides(&mut cfg, None, epochs)?;
    let graph = cfg.dataset.load()?;
    let label = cfg.dataset.label();
    let id = experiment_id("sweep", &cfg, &label, &serde_json::json!({"axis": axis, "values": values}));
    let dir = ExperimentDir::create(&ctx.root, &id)?;
    dir.write("config.toml", cfg.to_toml())?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut splits = Vec::new();
    for &seed in &cfg.seeds {
        let shared = split_for(&graph, cfg.train.ratio, seed)?;
        for &v in &values {
            let mut tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            axis.apply(&mut tc, v);
            tc.validate()?;
            let split = if axis == SweepAxis::Ratio {
                split_for(&graph, v, seed)?
            } else {
                shared.clone()
            };
            let scope = effective_scope(cfg.node_scope, &split);
            log::info!("seed {seed}: {} = {v}", axis.name());
            let run = run_ablation(Variant::Full, &tc, &graph, &split, scope)?;
            let sub = format!("runs/{}-{v}-seed{seed}/", axis.name());
            write_epochs(&dir, &sub, &run.summary.records, ctx.deterministic)?;
            let [mae, rmse, mape_pct] = headline(&run.report);
            rows.push(SweepRow {
                axis: axis.name().into(),
                value: v,
                seed,
                mae,
                rmse,
                mape_pct,
            });
            let mut report = run.report;
            report.variant = format!("{}={v}", axis.name());
            reports.push(report);
            if axis == SweepAxis::Ratio {
                splits.push(split);
            }
        }
        if axis != SweepAxis::Ratio {
            splits.push(shared);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(anyhow::Error::from)?;
    }
    dir.write("sweep.csv", w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    let written = sweep_plots(&dir, &rows)?;
    dir.write_json("report.json", &reports_to_json(&reports))?;
    dir.write("report.csv", reports_to_csv(&reports))?;

    let record = ExperimentRecord {
        id: id.clone(),
        command: format!("sweep:{}", axis.name()),
        dataset: label,
        code_version: store::CODE_VERSION.into(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        splits,
        metrics_file: None,
        reports,
        timing: None,
    };
    finish_record(&dir, record, started, ctx.deterministic)?;
    let mut msg = format!("experiment {id}\n{:>8} {:>9} {:>9} {:>8}\n", axis.name(), "MAE", "RMSE", "MAPE%");
    for (v, [mae, rmse, mape]) in sweep_means(&rows) {
        msg.push_str(&format!("{v:>8} {mae:9.4} {rmse:9.4} {mape:8.2}\n"));
    }
    msg.push_str(&format!("plots: {}\n", written.len()));
    Ok(Outcome {
        message: msg,
        dir: Some(dir.path),
    })
}

/// Mean metrics per swept value, in first-seen order.
fn sweep_means(rows: &[SweepRow]) -> Vec<(f64, [f64; 3])> {
    let mut order: Vec<f64> = Vec::new();
    for r in rows {
        if !order.contains(&r.value) {
            order.push(r.value);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            let n = sel.len() as f64;
            let m = |f: fn(&SweepRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            (v, [m(|r| r.mae), m(|r| r.rmse), m(|r| r.mape_pct)])
        })
        .collect()
}

fn sweep_plots(dir: &ExperimentDir, rows: &[SweepRow]) -> anyhow::Result<Vec<PathBuf>> {
    let axis = rows.first().map(|r| r.axis.clone()).unwrap_or_default();
    let means = sweep_means(rows);
    let xs: Vec<f64> = means.iter().map(|m| m.0).collect();
    let mut written = Vec::new();
    for (k, metric) in ["mae", "rmse", "mape"].iter().enumerate() {
        let series = [Series {
            name: metric.to_uppercase(),
            points: means.iter().map(|(v, m)| (*v, m[k])).collect(),
        }];
        let svg = plot::line_chart(
            &format!("{} vs {axis}", metric.to_uppercase()),
            &axis,
            &metric.to_uppercase(),
            &series,
            Some(&xs),
        );
        let name = format!("plots/sweep_{metric}.svg");
        dir.write(&name, svg)?;
        written.push(dir.file(&name));
    }
    Ok(written)
}

fn read_epochs(path: &Path) -> anyhow::Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(anyhow::Error::from))
        .collect()
}

fn loss_plot(dir: &ExperimentDir) -> anyhow::Result<PathBuf> {
    let path = dir.file("metrics.jsonl");
    if !path.is_file() {
        anyhow::bail!("experiment {} has no metrics.jsonl", dir.id);
    }
    let recs = read_epochs(&path)?;
    let series = |name: &str, f: fn(&EpochRecord) -> f64| Series {
        name: name.into(),
        points: recs.iter().map(|r| (r.epoch as f64, f(r))).collect(),
    };
    let svg = plot::line_chart(
        "training losses",
        "epoch",
        "loss",
        &[
            series("L_sim", |r| r.l_sim),
            series("L_fst", |r| r.l_fst_aug),
            series("L_KL", |r| r.l_kl),
            series("L_ori", |r| r.l_ori),
            series("val MAE", |r| r.val_mae),
        ],
        None,
    );
    dir.write("plots/loss.svg", svg)?;
    Ok(dir.file("plots/loss.svg"))
}

fn metrics_plot(dir: &ExperimentDir) -> anyhow::Result<PathBuf> {
    let path = dir.file("report.csv");
    let mut reader = csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{} lacks a {name} column", path.display()))
    };
    let (vi, hi, mi) = (col("variant")?, col("horizon")?, col("mae")?);
    let mut variants: Vec<String> = Vec::new();
    let mut horizons: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let (v, h) = (rec[vi].to_string(), rec[hi].to_string());
        let mae: f64 = rec[mi].parse()?;
        if !variants.contains(&v) {
            variants.push(v.clone());
        }
        if !horizons.contains(&h) {
            horizons.push(h.clone());
        }
        let e = acc.entry((v, h)).or_insert((0.0, 0));
        e.0 += mae;
        e.1 += 1;
    }
    let series: Vec<(String, Vec<f64>)> = variants
        .iter()
        .map(|v| {
            let vals = horizons
                .iter()
                .map(|h| acc.get(&(v.clone(), h.clone())).map_or(f64::NAN, |(s, n)| s / *n as f64))
                .collect();
            (v.clone(), vals)
        })
        .collect();
    let svg = plot::bar_chart("MAE by horizon", "MAE", &horizons, &series);
    dir.write("plots/metrics_mae.svg", svg)?;
    Ok(dir.file("plots/metrics_mae.svg"))
}

fn read_sweep_rows(dir: &ExperimentDir) -> anyhow::Result<Vec<SweepRow>> {
    let path = dir.file("sweep.csv");
    let mut reader = csv::Reader::from_path(&path).with_context(|| format!("experiment {} has no sweep.csv", dir.id))?;
    reader
        .deserialize()
        .map(|r| r.map_err(anyhow::Error::from))
        .collect()
}

fn cmd_plot(ctx: &RunContext, ids: &[String], kind: PlotKind) -> CliResult<Outcome> {
    let dirs = ids
        .iter()
        .map(|id| {
            ExperimentDir::open(&ctx.root, id).ok_or_else(|| CliError::runtime(format!("no experiment {id:?} in the store")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut written = Vec::new();
    for dir in &dirs {
        match kind {
            PlotKind::Loss => written.push(loss_plot(dir)?),
            PlotKind::Metrics => written.push(metrics_plot(dir)?),
            PlotKind::Sweep => written.extend(sweep_plots(dir, &read_sweep_rows(dir)?)?),
        }
    }
    let list: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    Ok(Outcome {
        message: list.join("\n"),
        dir: dirs.first().map(|d| d.path.clone()),
    })
}
