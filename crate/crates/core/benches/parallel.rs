use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use step_mi::data::synthetic::parity_task;
use step_mi::eval::{evaluate, OverlapScorer};
use step_mi::oracle::suite::PropertySuite;
use step_mi::par::Execution;
use step_mi::trainer::{batch_gradient, Trainer};
use step_mi::RunConfig;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn oracle_suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("oracle_suite");
    let suite = PropertySuite::new(1000, 7, 8);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| b.iter(|| suite.run(m)));
    }
    g.finish();
}

fn batch_grad(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_gradient");
    let examples = parity_task(256, 1);
    let config = RunConfig { batch_size: 64, ..RunConfig::default() };
    let mut trainer = Trainer::new(config.clone(), &examples).unwrap();
    let batch = trainer.next_batch();
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| batch_gradient(trainer.params(), &batch.pairs, &config, m).unwrap())
        });
    }
    g.finish();
}

fn eval_decode(c: &mut Criterion) {
    let mut g = c.benchmark_group("evaluate");
    let examples = parity_task(512, 2);
    let trainer = Trainer::new(RunConfig::default(), &examples).unwrap();
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| {
                evaluate(trainer.params(), trainer.vocab(), trainer.config(), &examples, &OverlapScorer, m).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, oracle_suite, batch_grad, eval_decode);
criterion_main!(benches);
