use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flower_core::flow::AnalyticGmmField;
use flower_core::flower::{self, refine, FlowerConfig};
use flower_core::rng::{standard_normal_matrix, standard_normal_vec, stream_rng};
use flower_core::{GaussianMixture, LinearGaussianObservation, LinearOperator, SpdSolveOptions};
use ndarray::{array, Array2};
use std::hint::black_box;

fn refinement(c: &mut Criterion) {
    let mut rng = stream_rng(0, 0);
    let d = 64;
    let ops = [
        ("mask", LinearOperator::mask(d, (0..d).step_by(2)).unwrap()),
        ("circulant", LinearOperator::circulant(standard_normal_vec(&mut rng, d)).unwrap()),
        ("dense", LinearOperator::dense(standard_normal_matrix(&mut rng, 32, d)).unwrap()),
    ];
    let opts = SpdSolveOptions::default();
    let mut group = c.benchmark_group("refine_d64");
    for (name, op) in ops {
        let y = standard_normal_vec(&mut rng, op.out_dim());
        let obs = LinearGaussianObservation::new(op, 0.1, y).unwrap();
        let x_hat = standard_normal_vec(&mut rng, d);
        group.bench_with_input(BenchmarkId::from_parameter(name), &obs, |b, obs| {
            let mut r = stream_rng(1, 0);
            b.iter(|| refine(black_box(x_hat.view()), obs, 0.6, 1, &mut r, &opts).unwrap())
        });
    }
    group.finish();
}

fn toy_run(c: &mut Criterion) {
    let prior = GaussianMixture::toy_prior();
    let field = AnalyticGmmField::new(prior);
    let obs = LinearGaussianObservation::new(LinearOperator::row_vector(array![1.5, 1.5]).unwrap(), 0.25, array![1.0]).unwrap();
    let cfg = FlowerConfig { n_steps: 1000, seed: 0, ..FlowerConfig::default() };
    c.bench_function("flower_toy_run_n1000", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            flower::run(&field, &obs, &cfg, &mut stream_rng(0, i)).unwrap()
        })
    });
    let batch = 64;
    c.bench_function("flower_toy_lockstep_64runs_n100", |b| {
        let cfg = FlowerConfig { n_steps: 100, ..cfg.clone() };
        b.iter(|| {
            let mut rngs: Vec<_> = (0..batch as u64).map(|i| stream_rng(0, i)).collect();
            let out = flower::run_lockstep(&field, &obs, &cfg, &mut rngs).unwrap();
            black_box(Array2::from_shape_fn((out.len(), 2), |(r, j)| out[r].sample[j]))
        })
    });
}

criterion_group!(benches, refinement, toy_run);
criterion_main!(benches);
