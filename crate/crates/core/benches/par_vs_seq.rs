//! Compares the rayon data-parallel kernels against single-threaded
//! execution of the same code by pinning a one-thread pool. Run with
//! `cargo bench -p moelab` (requires the default `parallel` feature).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moelab::fp8::{qgemm, quantize, AccumulatorModel, FpFormat, Grouping};
use moelab::tensor::Tensor;

fn single_thread_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool")
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[256, 256], 1.0, &mut rng);
    let b = Tensor::randn(&[256, 256], 1.0, &mut rng);
    let single = single_thread_pool();
    let mut g = c.benchmark_group("matmul_256");
    g.bench_function(BenchmarkId::new("threads", "all"), |bench| {
        bench.iter(|| a.matmul(&b).unwrap())
    });
    g.bench_function(BenchmarkId::new("threads", "1"), |bench| {
        bench.iter(|| single.install(|| a.matmul(&b).unwrap()))
    });
    g.finish();
}

fn bench_qgemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[64, 4096], 1.0, &mut rng);
    let b = Tensor::randn(&[4096, 64], 1.0, &mut rng);
    let qa = quantize(&a, Grouping::Tile1x128, FpFormat::e4m3(), false);
    let qb = quantize(&b, Grouping::Block128x128, FpFormat::e4m3(), false);
    let acc = AccumulatorModel::promoted(14, 128);
    let single = single_thread_pool();
    let mut g = c.benchmark_group("qgemm_promoted_k4096");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("threads", "all"), |bench| {
        bench.iter(|| qgemm(&qa, &qb, &acc).unwrap())
    });
    g.bench_function(BenchmarkId::new("threads", "1"), |bench| {
        bench.iter(|| single.install(|| qgemm(&qa, &qb, &acc).unwrap()))
    });
    g.finish();
}

fn bench_quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[512, 1024], 1.0, &mut rng);
    let single = single_thread_pool();
    let mut g = c.benchmark_group("quantize_tile_512x1024");
    g.bench_function(BenchmarkId::new("threads", "all"), |bench| {
        bench.iter(|| quantize(&x, Grouping::Tile1x128, FpFormat::e4m3(), true))
    });
    g.bench_function(BenchmarkId::new("threads", "1"), |bench| {
        bench.iter(|| single.install(|| quantize(&x, Grouping::Tile1x128, FpFormat::e4m3(), true)))
    });
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_qgemm, bench_quantize);
criterion_main!(benches);
