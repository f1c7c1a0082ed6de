use ndarray::s;
use stfit::evaluation::{evaluate_checkpoint, infer, run_ablation, NodeScope, Variant};
use stfit::graph_data::{split_nodes_bfs, synth_generate, SynthConfig};
use stfit::trainer::AdjacencyMode;
use stfit::{BackboneConfig, Checkpoint, SpatialTemporalGraph, TrainConfig, Trainer};

fn small_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        patience: 2,
        batch_size: 4,
        latent_dim: 4,
        aug_hidden: 8,
        topology_hidden: 8,
        topology_dim: 4,
        ratio: 0.4,
        max_batches_per_epoch: Some(3),
        model: BackboneConfig {
            hidden_dim: 8,
            input_steps: 9,
            output_steps: 3,
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn graph(n: usize, seed: u64) -> SpatialTemporalGraph {
    synth_generate(&SynthConfig::new(n, 160, seed)).unwrap()
}

#[test]
fn test_node_series_never_reach_training() {
    let g = graph(10, 1);
    let split = split_nodes_bfs(g.adjacency.as_ref(), 10, 0.4, 0).unwrap();
    let mut poisoned = g.clone();
    for &v in &split.test_nodes {
        poisoned.features.slice_mut(s![.., v, ..]).fill(1e6);
    }
    let mut a = Trainer::new(small_config(), &g, split.clone()).unwrap();
    let mut b = Trainer::new(small_config(), &poisoned, split).unwrap();
    let ra = a.fit(|_, _| Ok(())).unwrap();
    let rb = b.fit(|_, _| Ok(())).unwrap();
    assert_eq!(a.model.gf, b.model.gf);
    assert_eq!(a.model.aug, b.model.aug);
    assert_eq!(ra.best_val_mae, rb.best_val_mae);
}

#[test]
fn inference_covers_all_nodes_and_leaves_parameters_alone() {
    let g = graph(9, 2);
    let split = split_nodes_bfs(g.adjacency.as_ref(), 9, 0.4, 3).unwrap();
    let mut t = Trainer::new(small_config(), &g, split).unwrap();
    t.fit(|_, _| Ok(())).unwrap();
    let before = t.model.gf.clone();
    let range = t.temporal.test.clone();
    let p = infer(&t.model, &t.config, &t.norm, &g, range.clone()).unwrap();
    assert_eq!(t.model.gf, before);
    let windows = range.len() - 12 + 1;
    assert_eq!(p.forecast.shape(), &[windows, 3, 9, 1]);
    assert!(p.forecast.iter().all(|v| v.is_finite()));
    assert_eq!(p.target[[0, 0, 4, 0]], g.features[[range.start + 9, 4, 0]]);
    let again = infer(&t.model, &t.config, &t.norm, &g, range).unwrap();
    assert_eq!(p, again);
}

#[test]
fn identity_adjacency_keeps_nodes_independent() {
    let g = graph(8, 4);
    let split = split_nodes_bfs(g.adjacency.as_ref(), 8, 0.4, 0).unwrap();
    let cfg = TrainConfig {
        adjacency: AdjacencyMode::Identity,
        max_epochs: 1, patience: 1,
        ..small_config()
    };
    let mut t = Trainer::new(cfg, &g, split).unwrap();
    t.fit(|_, _| Ok(())).unwrap();
    let range = t.temporal.test.clone();
    let base = infer(&t.model, &t.config, &t.norm, &g, range.clone()).unwrap();
    let mut bumped = g.clone();
    bumped.features.slice_mut(s![range.clone(), 5, ..]).mapv_inplace(|v| v + 3.0);
    let moved = infer(&t.model, &t.config, &t.norm, &bumped, range).unwrap();
    for v in 0..8 {
        let a = base.forecast.slice(s![.., .., v, ..]);
        let b = moved.forecast.slice(s![.., .., v, ..]);
        if v == 5 {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b, "node {v} changed");
        }
    }
}

#[test]
fn unseen_graph_size_at_inference() {
    let g = graph(7, 5);
    let split = split_nodes_bfs(g.adjacency.as_ref(), 7, 0.4, 0).unwrap();
    let mut t = Trainer::new(TrainConfig { max_epochs: 1, patience: 1, ..small_config() }, &g, split).unwrap();
    t.fit(|_, _| Ok(())).unwrap();
    let bigger = graph(23, 6);
    let p = infer(&t.model, &t.config, &t.norm, &bigger, 100..140).unwrap();
    assert_eq!(p.forecast.shape()[2], 23);
}

#[test]
fn ablation_run_and_checkpoint_agree() {
    let g = graph(10, 7);
    let split = split_nodes_bfs(g.adjacency.as_ref(), 10, 0.4, 1).unwrap();
    let run = run_ablation(Variant::WithoutGs, &small_config(), &g, &split, NodeScope::TestNodes).unwrap();
    assert_eq!(run.report.variant, "w/o gs");
    assert_eq!(run.checkpoint.train_config.adjacency, AdjacencyMode::Full);
    let back = Checkpoint::from_json(&run.checkpoint.to_json().unwrap()).unwrap();
    let (report, _) = evaluate_checkpoint(&back, &g, NodeScope::TestNodes, "w/o gs").unwrap();
    assert_eq!(report, run.report);
    assert_eq!(report.rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), vec![3]);
}
