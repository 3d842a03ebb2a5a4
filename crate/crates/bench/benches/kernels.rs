use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uacvae_core::numerics::{Graph, Tensor};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [32, 64, 128] {
        let (a, b) = (random(n, n, &mut rng), random(n, n, &mut rng));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (x, y) = (g.leaf(a.clone()).unwrap(), g.leaf(b.clone()).unwrap());
                let z = g.matmul(x, y).unwrap();
                black_box(g.value(z).data()[0])
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (x, y) = (g.leaf(a.clone()).unwrap(), g.leaf(b.clone()).unwrap());
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z).unwrap();
                black_box(g.backward(s).unwrap())
            })
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random(40, 2000, &mut rng);
    c.bench_function("log_softmax 40x2000", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(logits.clone()).unwrap();
            let y = g.log_softmax(x).unwrap();
            black_box(g.value(y).data()[0])
        })
    });
}

criterion_group!(benches, matmul, softmax);
criterion_main!(benches);
