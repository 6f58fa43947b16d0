use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedstil_bench::desk_config;
use fedstil_core::runner::Experiment;
use fedstil_core::Strategy;

fn first_round(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk round 0");
    group.sample_size(10);
    for strategy in [Strategy::Fedstil, Strategy::Fedavg, Strategy::Local] {
        let mut cfg = desk_config();
        cfg.run.strategy = strategy;
        let exp = Experiment::new(cfg).unwrap();
        group.bench_function(strategy.as_str(), |b| {
            b.iter_batched(
                || exp.init_state(),
                |mut state| exp.run_round(&mut state).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn full_run(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk run");
    group.sample_size(10);
    let exp = Experiment::new(desk_config()).unwrap();
    group.bench_function("fedstil 5x6", |b| {
        b.iter(|| {
            let mut state = exp.init_state();
            exp.run(&mut state).unwrap();
            state
        })
    });
    group.finish();
}

criterion_group!(benches, first_round, full_run);
criterion_main!(benches);
