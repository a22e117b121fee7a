use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use agcnet::config::RunConfig;
use agcnet::data::Sample;
use agcnet::experiment::{build_net, prepare_data, synth_data};
use agcnet::par::Parallelism;
use agcnet::training::batch_loss_and_grad;

// @bench: batch_gradient/{sequential,parallel}/64: loss + gradient of one 64-sample batch

fn bench_batch_gradient(c: &mut Criterion) {
    let cfg = RunConfig {
        scales: 4,
        layers: 2,
        enc_channels: 16,
        hidden: 16,
        attn_dim: 8,
        shift_rank: 5,
        history: 12,
        horizon: 3,
        eval_horizons: vec![3],
        synth_nodes: 20,
        synth_steps: 400,
        ..RunConfig::default()
    };
    let d = synth_data(&cfg).expect("synthetic data");
    let data = prepare_data(d.graph, &d.table, &cfg).expect("prepared data");
    let net = build_net(&cfg, &data).expect("network");
    let batch: Vec<&Sample> = data.train.samples.iter().take(64).collect();
    let scale = data.scale();
    let loss = cfg.loss_config();

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, mode) in [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)] {
        group.bench_with_input(BenchmarkId::new(name, batch.len()), &mode, |b, &mode| {
            b.iter(|| batch_loss_and_grad(black_box(&net), black_box(&batch), scale, &loss, mode).expect("gradient"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradient);
criterion_main!(benches);
