// Batch gradient throughput: rayon over batch items vs the plain loop.
// Build with `--no-default-features` to bench the sequential core alone.

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;
use tamba_core::config::ModelConfig;
use tamba_core::exec::Execution;
use tamba_core::model::Model;
use tamba_core::objective::LossConfig;
use tamba_core::synth::GeneratorSpec;
use tamba_core::train::{batch_gradient, Dataset, Split};

fn batch(c: &mut Criterion) {
    let cfg = ModelConfig {
        d: 16,
        m: 16,
        p: 16,
        n_state: 4,
        d_ff: 32,
        depth: 1,
        scorer_hidden: 16,
        ..ModelConfig::default()
    };
    let data = Dataset::synthetic(&GeneratorSpec::default(), 0, Split::Train, 16).unwrap();
    let items = data.items();
    let (model, store) = Model::build(&cfg, 0).unwrap();
    let loss = LossConfig::default();

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    group.throughput(Throughput::Elements(items.len() as u64));
    let modes: &[(&str, Execution)] = if cfg!(feature = "parallel") {
        &[("parallel", Execution::Parallel), ("sequential", Execution::Sequential)]
    } else {
        &[("sequential", Execution::Sequential)]
    };
    for &(name, exec) in modes {
        group.bench_function(name, |b| {
            b.iter(|| black_box(batch_gradient(&model, &store, &data, &items, &loss, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
