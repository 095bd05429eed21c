use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use divtt_core::linalg::{svd, Matrix};
use divtt_core::policy::{sample_rollout, score_all_adapters};
use divtt_core::propcheck::DistinctTokensEnv;
use divtt_core::trainer::{new_optimizers, train_step, StepContext};
use divtt_core::{init_ensemble, AdapterInit, Rollout, TrainerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Stacked down-projections are (K·r) x d_in.
    for (rows, cols) in [(20, 32), (64, 64), (80, 128)] {
        let m = random_matrix(rows, cols, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &m, |b, m| {
            b.iter(|| svd(black_box(m)))
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let config = TrainerConfig::default();
    let ens = init_ensemble(&config.policy, 3, AdapterInit::Independent).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rollouts: Vec<Rollout> = (0..config.group_size)
        .map(|i| {
            let k = i % config.policy.ensemble_size;
            sample_rollout(&ens, k, &[], &config.limits, None, &mut rng).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("score_all_adapters");
    for chunk in [16, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(chunk), &chunk, |b, &chunk| {
            b.iter(|| score_all_adapters(&ens, black_box(&rollouts), chunk).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let env = DistinctTokensEnv::default();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for k in [1, 5] {
        let mut config = TrainerConfig::default();
        config.policy.ensemble_size = k;
        let base = init_ensemble(&config.policy, 4, AdapterInit::Independent).unwrap();
        group.bench_with_input(BenchmarkId::new("ensemble", k), &k, |b, _| {
            let mut ens = base.clone();
            let mut opts = new_optimizers(&ens);
            let mut step = 0;
            b.iter(|| {
                let ctx = StepContext {
                    seed: 0,
                    epoch: 0,
                    group: step,
                };
                step += 1;
                train_step(&mut ens, &mut opts, &[], &env, &config, None, ctx).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_svd, bench_scoring, bench_train_step);
criterion_main!(benches);
