use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use foliation::expansion::{DeterministicLeaf, ExpansionOptions};
use foliation::models::example1_model;
use foliation::noise::{generate_brownian_path, ou_stationary};
use foliation::{Execution, StateVector};

fn ensemble(c: &mut Criterion) {
    let model = example1_model(2.0).unwrap();
    let phi0 = StateVector::zeros(2);
    let xi: Vec<StateVector> = (0..=4)
        .map(|k| StateVector::new(vec![-1.0 + 0.5 * k as f64, 0.0]))
        .collect();
    let dt = 1e-3;
    let paths: Vec<_> = (0..16u64)
        .map(|s| ou_stationary(&generate_brownian_path(s, -20.0, 10.0, dt).unwrap()).unwrap())
        .collect();

    let mut group = c.benchmark_group("noisy_leaves");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let opts = ExpansionOptions {
            horizon: 10.0,
            execution: exec,
            ..Default::default()
        };
        let leaf = DeterministicLeaf::new(&model, &phi0, &xi, dt, &opts).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &paths, |b, paths| {
            b.iter(|| {
                exec.map(paths, |ou| leaf.with_noise(&model, 0.1, ou, &opts).unwrap().max_residual)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, ensemble);
criterion_main!(benches);
