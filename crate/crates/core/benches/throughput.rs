//! Sequential vs. rayon executors on the two data-parallel hot paths:
//! exact k-NN over document embeddings and per-instance gradients.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use moelab_core::batching::{
    embed_documents, random_batching, top_k_neighbors, two_domain_corpus, ByteTokenizer, Embedder,
};
use moelab_core::model::{ModelConfig, RoutingMode};
use moelab_core::par::Executor;
use moelab_core::training::{TrainPlan, Trainer};

fn executors() -> Vec<(&'static str, Executor)> {
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    vec![
        ("sequential", Executor::sequential()),
        ("parallel", Executor::new(threads).expect("positive worker count")),
    ]
}

fn knn(c: &mut Criterion) {
    let docs = two_domain_corpus(1500, 7);
    let emb = embed_documents(&docs, &Embedder::default()).unwrap();
    let mut group = c.benchmark_group("top_k_neighbors");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::new(name, docs.len()), |b| {
            b.iter(|| black_box(top_k_neighbors(&emb, 16, &exec).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        context_length: 128,
        segment_length: 32,
        num_experts: 4,
        num_layers: 2,
        model_dim: 64,
        ffn_dim: 128,
        num_heads: 4,
        vocab_size: 258,
        routing_mode: RoutingMode::CausalSegment,
        capacity_factor: 1.0,
    };
    let plan = TrainPlan {
        total_steps: 1_000_000,
        batch_size: 8 * 128,
        dense_warmup_fraction: 0.0,
        ..TrainPlan::default()
    };
    let data = random_batching(&two_domain_corpus(300, 7), &ByteTokenizer, 128, 7).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in executors() {
        let mut trainer = Trainer::new(&cfg, &plan).unwrap();
        group.bench_function(BenchmarkId::new(name, plan.batch_size), |b| {
            b.iter(|| black_box(trainer.step(&data, &exec).unwrap().metric.loss))
        });
    }
    group.finish();
}

criterion_group!(benches, knn, train_step);
criterion_main!(benches);
