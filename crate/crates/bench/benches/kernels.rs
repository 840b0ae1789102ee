use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eatr_core::data::{synthesize_sample, SyntheticConfig};
use eatr_core::model::predict;
use eatr_core::pseudo_events::pseudo_events;
use eatr_core::training::sample_objective;
use eatr_core::{hungarian, CostMatrix, ModelState, Profile, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (rows, cols) in [(5, 3), (10, 10), (32, 64)] {
        let cost = CostMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{rows}x{cols}")),
            &cost,
            |b, cost| b.iter(|| hungarian(black_box(cost)).unwrap()),
        );
    }
    group.finish();
}

fn bench_pseudo_events(c: &mut Criterion) {
    let mut group = c.benchmark_group("pseudo_events");
    for video_len in [50, 150] {
        let config = SyntheticConfig {
            video_len,
            ..Default::default()
        };
        let video = synthesize_sample(&config, 0).video.valid_tokens();
        group.bench_with_input(BenchmarkId::from_parameter(video_len), &video, |b, video| {
            b.iter(|| pseudo_events(black_box(video)).unwrap())
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let config = TrainConfig::for_profile(Profile::Desk);
    let model = ModelState::<f32>::new(config.model.clone(), 0).unwrap();
    let sample = synthesize_sample(&SyntheticConfig::default(), 0);
    c.bench_function("desk_forward", |b| {
        b.iter(|| predict(&model, black_box(&sample.video), black_box(&sample.sentence)).unwrap())
    });
    c.bench_function("desk_forward_backward", |b| {
        b.iter(|| sample_objective(&model, black_box(&sample), &config, 1).unwrap())
    });
}

criterion_group!(benches, bench_hungarian, bench_pseudo_events, bench_model);
criterion_main!(benches);
