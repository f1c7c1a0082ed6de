use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfit::autodiff::Graph;
use stfit::evaluation::{mae, rmse};
use stfit::topology::{sample_adjacency, sparsify, GumbelNoise, SparsifyVariant};

fn sampler(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [16, 33, 33];
    let p = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random::<f64>());
    let noise = GumbelNoise::sample(&shape, &mut rng);
    c.bench_function("sparsify + hard gumbel sample, 16x33x33", |b| {
        b.iter(|| {
            let g = Graph::new();
            let ph = sparsify(g.constant(p.clone()), 0.5, 0.1, SparsifyVariant::SoftThreshold).unwrap();
            let edges = sample_adjacency(ph, 0.5, true, &noise).unwrap().value().sum();
            black_box(edges)
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [64, 12, 170, 1];
    let x = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random::<f64>());
    let y = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random::<f64>());
    c.bench_function("mae + rmse, 64x12x170", |b| {
        b.iter(|| black_box(mae(&x, &y, None).unwrap() + rmse(&x, &y, None).unwrap()))
    });
}

criterion_group!(benches, sampler, metrics);
criterion_main!(benches);
