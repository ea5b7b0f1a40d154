use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fedmobile::exec::Execution;
use fedmobile::generator_agg::{coalition_values, probe_labels};
use fedmobile::models::GeneratorParams;
use fedmobile::orchestrator::{Experiment, ExperimentConfig};
use fedmobile::seed;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn round(c: &mut Criterion) {
    let cfg = ExperimentConfig { local_epochs: 1, ..ExperimentConfig::reference(0.6, 0) };
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut exp = Experiment::new(&cfg, exec).unwrap();
        let mut r = 0;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                r += 1;
                black_box(exp.run_round(r).unwrap())
            })
        });
    }
    group.finish();
}

fn coalitions(c: &mut Criterion) {
    let exp = Experiment::new(&ExperimentConfig::reference(0.6, 0), Execution::Sequential).unwrap();
    let probe = probe_labels(&exp.proxy.labels, exp.proxy.num_classes, 0, 1).unwrap();
    let mut group = c.benchmark_group("coalition_values");
    for players in [5usize, 8] {
        let mut rng = seed::rng(1, &[players as u64]);
        let reps: Vec<GeneratorParams> = (0..players)
            .map(|_| GeneratorParams::new(4, &exp.global_model.latent_dims(), 32, &mut rng).unwrap())
            .collect();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, players), &reps, |b, reps| {
                b.iter(|| black_box(coalition_values(reps, &exp.global_model, &probe, exec).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, round, coalitions);
criterion_main!(benches);
