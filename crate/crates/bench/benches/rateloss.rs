use cift_core::autodiff::Tape;
use cift_core::rateloss::{rate_loss, rate_loss_backward, RateLossConfig};
use cift_core::FeatureTensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(h: usize, w: usize, c: usize) -> FeatureTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    FeatureTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..4.0)).collect()).unwrap()
}

fn bench_rate_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("rate_loss");
    for (h, w, ch) in [(8, 8, 16), (16, 16, 8), (8, 16, 512)] {
        let f = features(h, w, ch);
        let id = format!("{h}x{w}x{ch}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &f, |b, f| b.iter(|| rate_loss(f)));
        group.bench_with_input(BenchmarkId::new("backward", &id), &f, |b, f| {
            b.iter(|| rate_loss_backward(f, RateLossConfig::default()))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        cift_core::Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let input = random(&[8, 32, 32]);
    let weight = random(&[16, 8, 3, 3]);
    c.bench_function("conv2d 8->16 32x32 forward+backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let x = tape.constant(input.clone());
            let w = tape.param(weight.clone());
            let y = tape.conv2d(x, w, None).unwrap();
            let root = tape.mean(y).unwrap();
            tape.backward(root).unwrap()
        })
    });
}

criterion_group!(benches, bench_rate_loss, bench_conv);
criterion_main!(benches);
