//! Rayon pool against a one-thread pool on the two hot paths: the gradient
//! oracle suite and a training step on a wide network. Building with
//! `--no-default-features` gives the plain sequential code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use predprop::oracle::{gradient_suite, GradCheckConfig, RandomNetConfig};
use predprop::{build_network, step_minibatch, Activation, NetworkSpec, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("1-thread", one), ("pool", all)]
}

fn oracle_suite(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..32).collect();
    let nets = RandomNetConfig::default();
    let check = GradCheckConfig::default();
    let mut group = c.benchmark_group("gradient_suite_32");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| gradient_suite(&seeds, &nets, &check).unwrap()))
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let spec = NetworkSpec::layered(&[64, 256, 256, 10], Activation::Relu, Activation::Linear).with_seed(1);
    let net = build_network(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = Array2::from_shape_fn((32, 64), |_| rng.random_range(-1.0..1.0));
    let labels = Array2::from_shape_fn((32, 10), |(r, c)| if r % 10 == c { 1.0 } else { 0.0 });
    let config = TrainingConfig {
        alpha_m: 0.05,
        alpha_s: 0.0,
        alpha_t: 0.01,
        u_m: 5,
        update_precision: false,
        ..TrainingConfig::default()
    };
    let mut group = c.benchmark_group("step_minibatch_64x256x256x10");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut n = net.clone();
                pool.install(|| step_minibatch(&mut n, &data, Some(&labels), &config, 0).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, oracle_suite, training_step);
criterion_main!(benches);
