//! Sequential versus rayon-parallel execution of the per-epoch work:
//! batched rollouts, decoder scoring, and a whole training epoch.
//!
//! Build with `--no-default-features` to check that the sequential
//! fallback compiles; in that build both variants run on one thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use optdisc::par::Executor;
use optdisc::trainer::{Algo, ContextSchedule, Trainer, TrainerConfig};

fn config() -> TrainerConfig {
    let mut c = TrainerConfig::new(Algo::Valor);
    c.contexts = ContextSchedule::Fixed { k: 8 };
    c.embed_dim = Some(32);
    c
}

fn executors() -> Vec<(&'static str, Executor)> {
    let workers = std::thread::available_parallelism().map_or(2, |n| n.get()).max(2);
    vec![
        ("sequential", Executor::sequential()),
        ("parallel", Executor::with_workers(workers)),
    ]
}

fn bench_epoch_parts(c: &mut Criterion) {
    let trainer = Trainer::new(config()).expect("valid config");
    let (contexts, seeds) = trainer.epoch_plan(1);
    let trajs = trainer
        .sample(&contexts, &seeds, &Executor::sequential())
        .expect("rollouts");

    let mut group = c.benchmark_group("rollouts_100");
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.sample(&contexts, &seeds, &exec).expect("rollouts")))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("decoder_score_100");
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.score(&trajs, &exec).expect("scores")))
        });
    }
    group.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut trainer = Trainer::new(config()).expect("valid config");
            let mut epoch = 0;
            b.iter(|| {
                epoch += 1;
                black_box(trainer.run_epoch(epoch, &exec).expect("epoch"))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_epoch_parts, bench_epoch);
criterion_main!(benches);
