use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stagepool_bench::scenario;
use stagepool_core::sim::static_estimates;
use stagepool_core::workflow::RemainingWork;
use stagepool_core::{run, validate_workflow};

fn bench_run(c: &mut Criterion) {
    let mut group = c.benchmark_group("run");
    group.sample_size(10);
    for preset in ["nl2sql-isolated", "nl2sql-shared"] {
        let cfg = scenario(preset, 1.0, 120.0);
        group.bench_with_input(BenchmarkId::from_parameter(preset), &cfg, |b, cfg| {
            b.iter(|| run(cfg).expect("simulation runs"))
        });
    }
    group.finish();
}

fn bench_remaining_work(c: &mut Criterion) {
    let cfg = scenario("nl2sql-isolated", 1.0, 1.0);
    let wf = validate_workflow(cfg.workflow.clone()).expect("valid workflow");
    let est = static_estimates(&wf, &cfg.topology.engine);
    c.bench_function("remaining_work_build", |b| b.iter(|| RemainingWork::build(&wf, &est).expect("acyclic")));
}

criterion_group!(benches, bench_run, bench_remaining_work);
criterion_main!(benches);
