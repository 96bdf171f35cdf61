use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use oar_core::checks::linear_equivalence;
use oar_core::config::ExperimentConfig;
use oar_core::eval::run_experiment;
use oar_core::exec::Execution;
use oar_core::second_stage::Injector;

const CONFIG: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../configs/synthetic.toml"
));

fn sweep(c: &mut Criterion) {
    let cfg = ExperimentConfig::from_toml_str(
        CONFIG,
        &[
            "run.seeds=4".into(),
            "stage1.epochs=50".into(),
            "stage2.epochs=50".into(),
        ],
    )
    .expect("bundled config");
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &e| b.iter(|| run_experiment(&cfg, e, None, &[]).expect("sweep")),
        );
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("dropout_explicit_form");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &e| b.iter(|| linear_equivalence(Injector::Dropout, 2, 20_000, 0, e).expect("mc")),
        );
    }
    g.finish();
}

criterion_group!(benches, sweep, monte_carlo);
criterion_main!(benches);
