//! Parallel-vs-sequential comparison of the data-parallel hot paths:
//! dense products, empirical tangent kernels, per-mode flow evaluation,
//! and sweep cells. Each case runs once on a single-thread pool and once
//! on the default pool; the `parallel` feature gates the rayon dispatch
//! (a `--no-default-features` build always takes the sequential path).

use criterion::{criterion_group, criterion_main, Criterion};

use l2flow::data::{Dataset, TargetMode};
use l2flow::flow::{closed_form_solution, FlowLoss, FlowProblem, KernelEigensystem};
use l2flow::harness::{run_sweep, BudgetPolicy, ModelSpec, SweepConfig};
use l2flow::linalg::Mat;
use l2flow::network::{Activation, MLPModel, Parameterization};
use l2flow::trainer::{Loss, TrainConfig};

fn pools() -> [(&'static str, rayon::ThreadPool); 2] {
    let seq = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let par = rayon::ThreadPoolBuilder::new().build().unwrap();
    [("seq", seq), ("par", par)]
}

fn bench_matmul(c: &mut Criterion) {
    let a = Mat::from_vec(1024, 512, (0..1024 * 512).map(|i| (i as f64).sin()).collect()).unwrap();
    let b = Mat::from_vec(512, 256, (0..512 * 256).map(|i| (i as f64).cos()).collect()).unwrap();
    let mut group = c.benchmark_group("matmul_1024x512x256");
    for (name, pool) in pools() {
        group.bench_function(name, |bench| bench.iter(|| pool.install(|| a.matmul(&b))));
    }
    group.finish();
}

fn bench_empirical_ntk(c: &mut Criterion) {
    let model = MLPModel::init(
        &[32, 512, 1],
        Activation::Relu,
        Parameterization::Ntk,
        2.0_f64.sqrt(),
        0.0,
        false,
        0,
    );
    let ds = Dataset::synthetic_teacher(128, 32, 1, 3.0);
    let mut group = c.benchmark_group("empirical_ntk_128x512");
    for (name, pool) in pools() {
        group.bench_function(name, |bench| {
            bench.iter(|| pool.install(|| model.empirical_ntk(&ds.inputs, 0).unwrap()))
        });
    }
    group.finish();
}

fn bench_flow_modes(c: &mut Criterion) {
    let gammas: Vec<f64> = (1..=64).map(|a| (a as f64).powf(-1.5)).collect();
    let kernel = KernelEigensystem::diagonal(gammas);
    let y = vec![1.0; 64];
    let p = FlowProblem::new(kernel, 2, 0.01, y, None, FlowLoss::Mse).unwrap();
    let grid: Vec<f64> = (0..40).map(|i| i as f64 * 5.0).collect();
    let mut group = c.benchmark_group("flow_closed_form_64_modes");
    for (name, pool) in pools() {
        group.bench_function(name, |bench| {
            bench.iter(|| pool.install(|| closed_form_solution(&p, &grid).unwrap()))
        });
    }
    group.finish();
}

fn bench_sweep_cells(c: &mut Criterion) {
    let train_ds = {
        let mut ds = Dataset::synthetic_teacher(64, 16, 2, 3.0);
        ds.encode_targets(TargetMode::EvenOdd).unwrap();
        ds
    };
    let config = SweepConfig {
        model: ModelSpec {
            layer_widths: vec![16, 64, 1],
            activation: Activation::Relu,
            parameterization: Parameterization::Ntk,
            sigma_w: 2.0_f64.sqrt(),
            sigma_b: 0.0,
            use_bias: false,
            init_seed: 0,
        },
        base: TrainConfig::new(0.1, 0.01, 64, Loss::Mse, 1),
        etas: vec![0.05, 0.1],
        lambdas: vec![0.1, 0.03],
        sigma_ws: None,
        budget: BudgetPolicy::Fixed { epochs: 30 },
        eval_points: 30,
    };
    let mut group = c.benchmark_group("sweep_4_cells");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(name, |bench| {
            bench.iter(|| pool.install(|| run_sweep(&config, &train_ds, &train_ds, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_empirical_ntk, bench_flow_modes, bench_sweep_cells);
criterion_main!(benches);
