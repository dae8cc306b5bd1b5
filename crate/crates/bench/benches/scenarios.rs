//! Parallel vs sequential fan-out of independent simulations.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vqp_bench::{scenarios, Baseline, Scenario, ScenarioConfig};
use vqp_core::batch;

fn configs() -> Vec<ScenarioConfig> {
    (0..8)
        .map(|seed| {
            let mut c = ScenarioConfig::new(Scenario::TailLatency, Baseline::Krcore, "fig3b").expect("preset");
            c.clients = 24;
            c.seed = seed;
            c
        })
        .collect()
}

fn fan_out(c: &mut Criterion) {
    let mut g = c.benchmark_group("tail_latency x8");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("map", batch::is_parallel()), |b| {
        b.iter(|| batch::map(configs(), |cfg| scenarios::run(&cfg).expect("run")))
    });
    g.bench_function("map_sequential", |b| {
        b.iter(|| batch::map_sequential(configs(), |cfg| scenarios::run(&cfg).expect("run")))
    });
    g.finish();
}

criterion_group!(benches, fan_out);
criterion_main!(benches);
