//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Each criterion also has a wall-clock budget.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfit::autodiff::Graph;
use stfit::evaluation::{ha_report, mae, mape, rmse, run_ablation, NodeScope, Variant};
use stfit::graph_data::{split_nodes_bfs, synth_generate, SynthConfig};
use stfit::nn::ParamStore;
use stfit::temporal_aug::{kl_value, loss_kl, mixup, Posterior};
use stfit::topology::{sample_adjacency, sparsify, sparsify_value, GumbelNoise, SparsifyVariant};
use stfit::trainer::Batch;
use stfit::{BackboneConfig, TrainConfig, Trainer};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let (pass, detail) = match outcome {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
        Err(e) => (false, e),
    };
    println!(
        "{} {name}: {detail} [{:.2} s / {:.0} s]",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    pass
}

fn oracle(x: &[f64], y: &[f64], m: &[bool]) -> (f64, f64, f64) {
    let (mut a, mut s, mut p, mut n, mut np) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for i in 0..x.len() {
        if !m[i] || !x[i].is_finite() {
            continue;
        }
        let e = x[i] - y[i];
        a += e.abs();
        s += e * e;
        n += 1;
        if x[i].abs() >= 1e-4 {
            p += (e / x[i]).abs();
            np += 1;
        }
    }
    (a / n as f64, (s / n as f64).sqrt(), p / np as f64)
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = [rng.random_range(1..6), rng.random_range(1..13), rng.random_range(1..8), 1];
        let len: usize = shape.iter().product();
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut m: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
        m[0] = true;
        let t = |v: &Vec<f64>| ArrayD::from_shape_vec(IxDyn(&shape), v.clone()).unwrap();
        let mask = ArrayD::from_shape_vec(IxDyn(&shape), m.clone()).unwrap();
        let (oa, or, op) = oracle(&x, &y, &m);
        let got = (
            mae(&t(&x), &t(&y), Some(&mask)).map_err(|e| e.to_string())?,
            rmse(&t(&x), &t(&y), Some(&mask)).map_err(|e| e.to_string())?,
            mape(&t(&x), &t(&y), Some(&mask)).map_err(|e| e.to_string())?,
        );
        worst = worst.max(rel(got.0, oa)).max(rel(got.1, or)).max(rel(got.2, op));
    }
    ensure(worst <= 1e-6, || format!("worst relative error {worst:.3e} > 1e-6"))?;
    let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap();
    let y = ArrayD::from_shape_vec(IxDyn(&[3]), vec![2.0, 2.0, 5.0]).unwrap();
    let hand = (
        mae(&x, &y, None).unwrap(),
        rmse(&x, &y, None).unwrap(),
        100.0 * mape(&x, &y, None).unwrap(),
    );
    ensure(
        (hand.0 - 1.0).abs() <= 1e-4 && (hand.1 - 1.29099).abs() <= 1e-4 && (hand.2 - 55.556).abs() <= 1e-3,
        || format!("hand case gave {hand:?}"),
    )?;
    Ok(format!(
        "100 masked tensors, worst rel err {worst:.1e}; hand case ({:.5}, {:.5}, {:.3}%)",
        hand.0, hand.1, hand.2
    ))
}

fn gumbel_frequency() -> Check {
    let draws = 20000;
    let g = Graph::new();
    let p = g.constant(ArrayD::from_elem(IxDyn(&[draws, 2, 2]), 0.7));
    let noise = GumbelNoise::sample(&[draws, 2, 2], &mut ChaCha8Rng::seed_from_u64(2024));
    let a = sample_adjacency(p, 0.5, true, &noise).map_err(|e| e.to_string())?;
    let v = a.value();
    let edges = (0..draws).filter(|&k| v[[k, 0, 1]] == 1.0).count();
    let binary = v.iter().all(|&x| x == 0.0 || x == 1.0);
    let freq = edges as f64 / draws as f64;
    ensure(binary, || "hard samples are not binary".into())?;
    ensure((freq - 0.7).abs() <= 0.0097, || format!("edge frequency {freq:.4}"))?;
    Ok(format!("edge frequency {freq:.4} over {draws} draws (|Δ| ≤ 0.0097)"))
}

fn tiny_trainer(ratio: f64, nodes: usize, seed: u64) -> Trainer {
    let cfg = TrainConfig {
        batch_size: 2,
        latent_dim: 3,
        aug_hidden: 3,
        topology_hidden: 3,
        topology_dim: 3,
        ratio,
        hard_sampling: false,
        seed,
        model: BackboneConfig {
            hidden_dim: 3,
            input_steps: 9,
            output_steps: 2,
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    };
    let graph = synth_generate(&SynthConfig::new(nodes, 80, seed)).unwrap();
    let split = split_nodes_bfs(graph.adjacency.as_ref(), nodes, ratio, seed).unwrap();
    Trainer::new(cfg, &graph, split).unwrap()
}

/// Norm-relative error between analytic and central-difference gradients.
fn fd_error(
    store: &ParamStore,
    analytic: &[ArrayD<f64>],
    loss: impl Fn(&ParamStore) -> f64,
) -> (f64, usize) {
    let h = 1e-4;
    let (mut diff, mut na, mut nn, mut count) = (0.0, 0.0, 0.0, 0);
    let mut probe = store.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[k].as_slice_memory_order().unwrap()[i];
            probe.tensors_mut()[k].as_slice_memory_order_mut().unwrap()[i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[k].as_slice_memory_order_mut().unwrap()[i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[k].as_slice_memory_order_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_slice_memory_order().unwrap()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            count += 1;
        }
    }
    (diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300), count)
}

fn gradient_fidelity() -> Check {
    let mut t = tiny_trainer(1.0, 4, 5);
    // Move off the initialisation so no term sits at a trivial point.
    for _ in 0..3 {
        t.run_epoch().map_err(|e| e.to_string())?;
    }
    let starts: Vec<usize> = t.train_starts().take(2).collect();
    let batch: Batch = t.batch(&starts);
    let noise = t.draw_noise(starts.len()).map_err(|e| e.to_string())?;

    let (_, ga) = t.aug_loss(&t.model.aug, &batch, &noise).map_err(|e| e.to_string())?;
    let (ea, na) = fd_error(&t.model.aug, &ga, |s| t.aug_loss(s, &batch, &noise).unwrap().0.total);
    let (_, gg) = t.gf_loss(&t.model.gf, &batch, &noise).map_err(|e| e.to_string())?;
    let (eg, ng) = fd_error(&t.model.gf, &gg, |s| t.gf_loss(s, &batch, &noise).unwrap().0.total);
    ensure(ea <= 1e-4 && eg <= 1e-4, || format!("relative errors L_aug {ea:.2e}, L_gf {eg:.2e}"))?;
    Ok(format!(
        "L_aug rel err {ea:.2e} over {na} params, L_gf rel err {eg:.2e} over {ng} params (N=4, d=3, κ=9, τ=2)"
    ))
}

fn phase_isolation() -> Check {
    let mut t = tiny_trainer(0.5, 8, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let starts: Vec<usize> = t.train_starts().collect();
    for k in 0..20 {
        let batch: Vec<usize> = (0..4).map(|_| starts[rng.random_range(0..starts.len())]).collect();
        let gf = t.model.gf.clone();
        let aug = t.model.aug.clone();
        t.phase1_step(&batch).map_err(|e| e.to_string())?;
        ensure(t.model.gf == gf, || format!("phase 1 changed θ^gf at batch {k}"))?;
        ensure(t.model.aug != aug, || format!("phase 1 left θ^aug unchanged at batch {k}"))?;
        let aug = t.model.aug.clone();
        let gf = t.model.gf.clone();
        t.phase2_step(&batch).map_err(|e| e.to_string())?;
        ensure(t.model.aug == aug, || format!("phase 2 changed θ^aug at batch {k}"))?;
        ensure(t.model.gf != gf, || format!("phase 2 left θ^gf unchanged at batch {k}"))?;
    }
    Ok("20 batches: phase 1 never touched θ^gf, phase 2 never touched θ^aug (bitwise)".into())
}

fn leakage() -> Check {
    let graph = synth_generate(&SynthConfig::new(12, 200, 9)).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        latent_dim: 4,
        aug_hidden: 6,
        topology_hidden: 6,
        topology_dim: 4,
        ratio: 0.25,
        max_batches_per_epoch: Some(4),
        model: BackboneConfig {
            hidden_dim: 6,
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    };
    let split = split_nodes_bfs(graph.adjacency.as_ref(), 12, 0.25, 1).unwrap();
    let mut a = Trainer::new(cfg.clone(), &graph, split.clone()).map_err(|e| e.to_string())?;
    let train_end = a.temporal.train.end;
    let mut checked = 0;
    for (k, &v) in split.test_nodes.iter().enumerate() {
        let mut poisoned = graph.clone();
        let t = (k * 37) % train_end;
        poisoned.features[[t, v, 0]] += 1e3;
        a = Trainer::new(cfg.clone(), &graph, split.clone()).map_err(|e| e.to_string())?;
        let mut b = Trainer::new(cfg.clone(), &poisoned, split.clone()).map_err(|e| e.to_string())?;
        ensure(a.norm == b.norm, || format!("NormStats moved when node {v} changed"))?;
        let starts: Vec<usize> = a.train_starts().step_by(7).take(4).collect();
        let (ba, bb) = (a.batch(&starts), b.batch(&starts));
        ensure(ba == bb, || format!("training batch moved when node {v} changed"))?;
        let na = a.draw_noise(starts.len()).map_err(|e| e.to_string())?;
        let nb = b.draw_noise(starts.len()).map_err(|e| e.to_string())?;
        ensure(na == nb, || format!("sampled noise moved when node {v} changed"))?;
        let la = a.aug_loss(&a.model.aug, &ba, &na).map_err(|e| e.to_string())?;
        let lb = b.aug_loss(&b.model.aug, &bb, &nb).map_err(|e| e.to_string())?;
        ensure(la == lb, || format!("L_aug or its gradient moved when node {v} changed"))?;
        let la = a.gf_loss(&a.model.gf, &ba, &na).map_err(|e| e.to_string())?;
        let lb = b.gf_loss(&b.model.gf, &bb, &nb).map_err(|e| e.to_string())?;
        ensure(la == lb, || format!("L_gf or its gradient moved when node {v} changed"))?;
        checked += 1;
    }
    // Whole epochs, including validation, on a copy with every test node scrambled.
    let mut scrambled = graph.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &v in &split.test_nodes {
        for t in 0..train_end {
            scrambled.features[[t, v, 0]] = rng.random_range(-100.0..100.0);
        }
    }
    a = Trainer::new(cfg.clone(), &graph, split.clone()).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(cfg, &scrambled, split.clone()).map_err(|e| e.to_string())?;
    for _ in 0..2 {
        let (ra, rb) = (a.run_epoch().map_err(|e| e.to_string())?, b.run_epoch().map_err(|e| e.to_string())?);
        ensure(ra.l_aug == rb.l_aug && ra.l_gf == rb.l_gf, || "epoch losses moved".into())?;
    }
    ensure(a.model.aug == b.model.aug && a.model.gf == b.model.gf, || "parameters diverged".into())?;
    Ok(format!(
        "{checked} single-entry perturbations and one full scramble of test nodes: NormStats, L_aug, L_gf and gradients bitwise equal"
    ))
}

fn closed_form() -> Check {
    let g = Graph::new();
    let kl = loss_kl(Posterior {
        mu: g.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0)),
        log_sigma: g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.0)),
    })
    .item();
    ensure(kl == 0.5 && kl_value(&[1.0], &[1.0]) == 0.5, || format!("KL = {kl}"))?;
    let a = g.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap());
    let b = g.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 1.0]).unwrap());
    let m = mixup(a, b, 0.25).map_err(|e| e.to_string())?.value().clone();
    ensure(m.as_slice().unwrap() == [0.25, 0.75], || format!("mixup = {m}"))?;
    let paper = sparsify_value(0.9, 0.9, 0.1, SparsifyVariant::Paper).unwrap();
    ensure((paper - 0.731059).abs() <= 1e-6, || format!("paper variant {paper}"))?;
    let soft = sparsify_value(0.0, 0.9, 0.1, SparsifyVariant::SoftThreshold).unwrap();
    ensure((soft - 1.234e-4).abs() <= 1e-7, || format!("soft-threshold variant {soft}"))?;
    Ok(format!("KL 0.5, mixup [0.25, 0.75], paper {paper:.6}, soft-threshold {soft:.4e}"))
}

fn sparsity_monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let eps = [0.0, 0.3, 0.6, 0.9];
    let mut trials = 0;
    for variant in [SparsifyVariant::SoftThreshold, SparsifyVariant::Paper] {
        for _ in 0..25 {
            let m = rng.random_range(5..40);
            let p = ArrayD::from_shape_simple_fn(IxDyn(&[2, m, m]), || rng.random::<f64>());
            let noise = GumbelNoise::sample(&[2, m, m], &mut rng);
            let counts = eps
                .iter()
                .map(|&e| {
                    let g = Graph::new();
                    let ph = sparsify(g.constant(p.clone()), e, 0.1, variant)?;
                    let edges = sample_adjacency(ph, 0.5, true, &noise)?.value().sum();
                    Ok(edges)
                })
                .collect::<stfit::Result<Vec<f64>>>()
                .map_err(|e| e.to_string())?;
            ensure(counts.windows(2).all(|w| w[1] <= w[0]), || {
                format!("{variant} edge counts {counts:?} increase with ε")
            })?;
            trials += 1;
        }
    }
    Ok(format!("{trials} random P (both variants): hard edge count non-increasing over ε ∈ {eps:?}"))
}

fn end_to_end() -> Check {
    let mut full = Vec::new();
    let mut identity = Vec::new();
    let mut ha = Vec::new();
    for seed in 0..3u64 {
        let graph = synth_generate(&SynthConfig::new(30, 480, seed)).map_err(|e| e.to_string())?;
        let split = split_nodes_bfs(graph.adjacency.as_ref(), 30, 0.10, seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            max_epochs: 50,
            seed,
            ..TrainConfig::default()
        };
        for (v, out) in [(Variant::Full, &mut full), (Variant::Identity, &mut identity)] {
            let r = run_ablation(v, &cfg, &graph, &split, NodeScope::TestNodes).map_err(|e| e.to_string())?;
            if v == Variant::Full {
                let m = &cfg.model;
                let h = ha_report(&graph, &split, &r.checkpoint.temporal, m.input_steps, m.output_steps, NodeScope::TestNodes)
                    .map_err(|e| e.to_string())?;
                ha.push(h.average.mae);
            }
            out.push(r.report.average.mae);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, i, h) = (mean(&full), mean(&identity), mean(&ha));
    let detail = format!(
        "mean test MAE full {f:.4} {full:.4?}, identity {i:.4} {identity:.4?}, HA {h:.4} {ha:.4?}"
    );
    ensure(f <= i && f <= h, || detail.clone())?;
    Ok(detail)
}

fn cli_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("det.toml"), "[train]\nmax_epochs = 5\npatience = 5\n").unwrap();
    let mut files = Vec::new();
    for root in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_stfit"))
            .args(["--config", "det.toml", "--seed", "1", "--deterministic", "--out", root, "train"])
            .current_dir(dir.path())
            .env_remove("STFIT_HOME")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let id = stdout
            .lines()
            .find_map(|l| l.strip_prefix("experiment "))
            .ok_or("no experiment id printed")?
            .to_string();
        let path = dir.path().join(root).join("experiments").join(id.trim()).join("metrics.jsonl");
        files.push(fs::read(path).map_err(|e| e.to_string())?);
    }
    ensure(!files[0].is_empty() && files[0] == files[1], || "metrics.jsonl differs between runs".into())?;
    Ok(format!(
        "two deterministic train runs wrote identical metrics.jsonl ({} bytes)",
        files[0].len()
    ))
}

fn pems08() -> Option<Check> {
    let dir = std::env::var_os("STFIT_PEMS08_DIR")?;
    Some((|| {
        let graph = stfit::graph_data::load_dataset(&dir).map_err(|e| e.to_string())?;
        let mut maes = Vec::new();
        for seed in 0..3u64 {
            let split = split_nodes_bfs(graph.adjacency.as_ref(), graph.num_nodes, 0.10, seed).map_err(|e| e.to_string())?;
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let r = run_ablation(Variant::Full, &cfg, &graph, &split, NodeScope::TestNodes).map_err(|e| e.to_string())?;
            maes.push(r.report.row(12).map_or(r.report.average.mae, |row| row.mae));
        }
        let m = maes.iter().sum::<f64>() / 3.0;
        let detail = format!("horizon-12 test MAE {m:.2} {maes:.2?} vs 25.09 ± 10%");
        ensure((m - 25.09).abs() <= 0.1 * 25.09, || detail.clone())?;
        Ok(detail)
    })())
}

fn main() {
    // Optional name filters, e.g. `cargo test --test acceptance -- leakage`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let s = Duration::from_secs;
    let criteria: [(&str, Duration, fn() -> Check); 9] = [
        ("metric-oracle", s(5), metric_oracle),
        ("gumbel-sampler", s(10), gumbel_frequency),
        ("gradient-fidelity", s(60), gradient_fidelity),
        ("phase-isolation", s(30), phase_isolation),
        ("inductive-leakage", s(30), leakage),
        ("closed-form-values", s(5), closed_form),
        ("sparsity-monotonicity", s(10), sparsity_monotonicity),
        ("synthetic-end-to-end", s(600), end_to_end),
        ("cli-determinism", s(300), cli_determinism),
    ];
    let results: Vec<bool> = criteria
        .into_iter()
        .filter(|(name, ..)| selected(name))
        .map(|(name, budget, f)| run(name, budget, f))
        .collect();
    match selected("pems08-reproduction").then(pems08).flatten() {
        Some(outcome) => {
            let ok = outcome.is_ok();
            match outcome {
                Ok(d) => println!("PASS pems08-reproduction: {d}"),
                Err(e) => println!("FAIL pems08-reproduction: {e}"),
            }
            if !ok {
                std::process::exit(1);
            }
        }
        None => println!("SKIP pems08-reproduction: optional; set STFIT_PEMS08_DIR to a converted PEMS08 directory"),
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
