use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lookalike_lab::exec::{rng_from_seed, Execution};
use lookalike_lab::sweep::{run_sweep, SweepEstimator, SweepSpec};
use lookalike_lab::{build_ground_truth, min_norm_fit, risk_monte_carlo, sample_dataset, ProblemConfig};

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn small_sweep(c: &mut Criterion) {
    let mut base = ProblemConfig::reference(120);
    base.d = 80;
    base.p = 30;
    let spec = SweepSpec {
        base,
        axis: "n".into(),
        values: vec![40.0, 60.0, 120.0, 160.0],
        replicates: 4,
        estimators: vec![SweepEstimator::MinNorm, SweepEstimator::LookAlikeTrue],
        mc_test: 0,
    };
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_sweep(&spec, 3, exec).unwrap())
        });
    }
    group.finish();
}

fn monte_carlo_risk(c: &mut Criterion) {
    let mut cfg = ProblemConfig::reference(150);
    cfg.d = 100;
    cfg.p = 40;
    let mut rng = rng_from_seed(5);
    let gt = build_ground_truth(&cfg, &mut rng).unwrap();
    let data = sample_dataset(&cfg, &gt, &mut rng).unwrap();
    let fit = min_norm_fit(&data.x, &data.y).unwrap();
    let mut group = c.benchmark_group("mc_risk");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| risk_monte_carlo(&fit.theta, &gt, &cfg, 50_000, &mut rng_from_seed(9), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, small_sweep, monte_carlo_risk);
criterion_main!(benches);
