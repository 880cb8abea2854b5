use aidd_bench::{test_tone, token_fixture};
use aidd_core::codec::{encode, train_codebook, CodecParams};
use aidd_core::diffusion::NoiseSchedule;
use aidd_core::metrics::{lsd, SpectrogramParams};
use aidd_core::net::{ModelConfig, ScoreNetwork};
use aidd_core::train::{train_step, TrainConfig, TrainState};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig { vocab_size: 64, ..ModelConfig::default() };
    let net = ScoreNetwork::init(cfg, 0).unwrap();
    let mut g = c.benchmark_group("forward");
    for len in [32usize, 128, 256] {
        let x = token_fixture(len, 64);
        g.bench_with_input(BenchmarkId::from_parameter(len), &x, |b, x| {
            b.iter(|| net.forward(black_box(x), 0.5).unwrap())
        });
    }
    g.finish();
}

fn train(c: &mut Criterion) {
    let cfg = ModelConfig { vocab_size: 64, ..ModelConfig::default() };
    let schedule = NoiseSchedule::default();
    let tc = TrainConfig { batch_size: 4, sequence_length: 64, ..TrainConfig::overfit() };
    let batch: Vec<Vec<u32>> = (0..4)
        .map(|r| token_fixture(64 + r, 64).ids().iter().map(|&t| t % 64).take(64).collect())
        .collect();
    let mut state = TrainState::new(ScoreNetwork::init(cfg, 0).unwrap());
    c.bench_function("train_step/4x64", |b| {
        b.iter(|| train_step(&mut state, black_box(&batch), &schedule, &tc).unwrap())
    });
}

fn codec(c: &mut Criterion) {
    let w = test_tone(2.0, 16_000);
    let params = CodecParams { codebook_size: 64, ..CodecParams::default() };
    let spec = train_codebook(std::slice::from_ref(&w), &params, 0).unwrap();
    c.bench_function("encode/2s", |b| b.iter(|| encode(black_box(&w), &spec).unwrap()));
}

fn spectral(c: &mut Criterion) {
    let x = test_tone(4.0, 16_000);
    let y = test_tone(4.1, 16_000);
    let y = aidd_core::audio::Waveform::new(y.samples()[..x.len()].to_vec(), 16_000).unwrap();
    c.bench_function("lsd/4s", |b| {
        b.iter(|| lsd(black_box(&x), black_box(&y), SpectrogramParams::default()).unwrap())
    });
}

criterion_group!(benches, forward, train, codec, spectral);
criterion_main!(benches);
