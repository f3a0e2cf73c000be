//! Parallel versus single-worker timings of the data-parallel hot spots.
//!
//! Each benchmark runs once inside a one-thread rayon pool and once on a pool
//! sized by `PDEINVREG_THREADS` (all cores when unset). Building with
//! `--no-default-features` swaps in the sequential fallback, in which case
//! both variants run the same plain loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;

use pdeinvreg::datagen::{build_dataset, DatasetConfig, Problem, Split};
use pdeinvreg::exec;
use pdeinvreg::forward::{eit_linear_forward, trigonometric_patterns};
use pdeinvreg::mesh::{generate_disk, generate_l_shape};
use pdeinvreg::pipeline::{evaluate, Model};
use pdeinvreg::regularizer::{GraphContext, ModelKind, RegularizerParams, UnrollConfig};

fn pools() -> Vec<(String, ThreadPool)> {
    let n = exec::threads_from_env()
        .expect("bad thread count")
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    [1, n.max(2)]
        .into_iter()
        .map(|t| {
            let label = if t == 1 { "sequential".to_string() } else { format!("parallel-{t}") };
            (label, rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap())
        })
        .collect()
}

fn bench_eit_jacobian(c: &mut Criterion) {
    let mesh = generate_disk(8, 16).unwrap();
    let patterns = trigonometric_patterns(16);
    let mut group = c.benchmark_group("eit_linear_forward");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| pool.install(|| eit_linear_forward(&mesh, 1.0, 0.01, &patterns).unwrap()))
        });
    }
    group.finish();
}

fn bench_dataset(c: &mut Criterion) {
    let mesh = generate_l_shape(12).unwrap();
    let problem = Problem::PoissonDense;
    let fwd = problem.linear_forward(&mesh).unwrap();
    let cfg = DatasetConfig::new(problem, 32, 4, 4, 0.01, 3);
    let mut group = c.benchmark_group("build_dataset");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| pool.install(|| build_dataset(&mesh, &fwd, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let mesh = generate_l_shape(12).unwrap();
    let problem = Problem::PoissonDense;
    let fwd = problem.linear_forward(&mesh).unwrap();
    let unroll = UnrollConfig {
        n_unroll: 4,
        ..UnrollConfig::default()
    };
    let ctx = GraphContext::new(&mesh, unroll.pe_k).unwrap();
    let data = build_dataset(&mesh, &fwd, &DatasetConfig::new(problem, 1, 1, 16, 0.01, 5))
        .unwrap()
        .dataset;
    let model = Model::Learned {
        params: RegularizerParams::init(ModelKind::Acmp, unroll.hidden, ctx.pe_dim(), 1),
        unroll,
    };
    let mut group = c.benchmark_group("evaluate_acmp");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| pool.install(|| evaluate(&model, &ctx, &fwd, &data, Split::Test).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_eit_jacobian, bench_dataset, bench_evaluate);
criterion_main!(benches);
