//! Benchmarks for the hot paths: robust aggregation, hard-sample
//! retrieval, the BPR backward pass, PCA and one full federated epoch.

use std::collections::HashSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fedrec_bench::{bench_registry, random_matrix, random_rows, random_updates};
use fedrec_core::attacks::{build_candidate_pool, hardest_negatives};
use fedrec_core::defenses::{apply_rule, AggregationRule};
use fedrec_core::eval::pca_project;
use fedrec_core::model::{bpr_mean_gradient, init_params, PredictorKind, UserRepr};
use fedrec_core::{run_training, SimulationConfig};

fn aggregation(c: &mut Criterion) {
    let updates = random_updates(32, 4096, 1);
    let mut group = c.benchmark_group("aggregation");
    for rule in [
        AggregationRule::Mean,
        AggregationRule::Median,
        AggregationRule::TrimmedMean { beta: None },
        AggregationRule::Krum { f: None },
        AggregationRule::MultiKrum {
            f: None,
            m_select: None,
        },
        AggregationRule::NormBound { tau: 2.0 },
    ] {
        group.bench_with_input(
            BenchmarkId::from_parameter(rule.label()),
            &rule,
            |b, rule| b.iter(|| apply_rule(black_box(rule), black_box(&updates), 0.1).unwrap()),
        );
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let items = random_matrix(5000, 64, 2);
    let user: Vec<f64> = items.row(7).to_vec();
    let pool = build_candidate_pool(5000, 1.0, 3).unwrap();
    let exclude: HashSet<usize> = (0..40).map(|i| i * 17).collect();
    c.bench_function("retrieval/top10_of_5000", |b| {
        b.iter(|| {
            hardest_negatives(
                black_box(&items),
                black_box(&user),
                10,
                &pool,
                &exclude,
            )
            .unwrap()
        })
    });
}

fn bpr_backward(c: &mut Criterion) {
    let params = init_params(64, 2000, 64, PredictorKind::DotProduct, 4).unwrap();
    let profile: Vec<usize> = (0..32).map(|i| i * 31).collect();
    let pairs: Vec<(usize, usize)> = (0..4).map(|i| (i * 7, 1000 + i * 13)).collect();
    c.bench_function("bpr/seq_mean_4pairs_d64", |b| {
        b.iter(|| {
            bpr_mean_gradient(
                black_box(&params),
                &UserRepr::Seq(&profile),
                black_box(&pairs),
            )
            .unwrap()
        })
    });
}

fn federated_epoch(c: &mut Criterion) {
    let (registry, num_items) = bench_registry(200, 100, 5).unwrap();
    let config = SimulationConfig {
        seed: 5,
        dim: 32,
        max_epochs: 1,
        byzantine_ratio: 0.1,
        ..SimulationConfig::default()
    };
    let mut group = c.benchmark_group("epoch");
    group.sample_size(10);
    group.bench_function("200_users_100_items", |b| {
        b.iter(|| run_training(black_box(&config), &registry, num_items).unwrap())
    });
    group.finish();
}

fn pca(c: &mut Criterion) {
    let rows = random_rows(256, 16, 6);
    c.bench_function("pca/256x16_to_2", |b| {
        b.iter(|| pca_project(black_box(&rows), 2).unwrap())
    });
}

criterion_group!(
    benches,
    aggregation,
    retrieval,
    bpr_backward,
    federated_epoch,
    pca
);
criterion_main!(benches);
