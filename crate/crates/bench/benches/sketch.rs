use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use driftwatch::TDigest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn amounts(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = LogNormal::new(3.5, 1.0).unwrap();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn digest_of(values: &[f64]) -> TDigest {
    let mut d = TDigest::default();
    d.update_batch(values).unwrap();
    d
}

fn update(c: &mut Criterion) {
    let mut group = c.benchmark_group("update");
    for n in [1_000, 20_000, 100_000] {
        let values = amounts(n, 1);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("per_sample", n), &values, |b, values| {
            b.iter(|| {
                let mut d = TDigest::default();
                for &v in values {
                    d.add(v).unwrap();
                }
                d
            })
        });
        group.bench_with_input(BenchmarkId::new("batch", n), &values, |b, values| {
            b.iter(|| digest_of(values))
        });
    }
    group.finish();
}

fn merge(c: &mut Criterion) {
    let mut group = c.benchmark_group("merge");
    for n in [1_000, 20_000, 100_000] {
        let (a, b) = (digest_of(&amounts(n, 2)), digest_of(&amounts(n, 3)));
        group.bench_with_input(BenchmarkId::from_parameter(n), &(a, b), |bench, (a, b)| {
            bench.iter(|| a.merge(b).unwrap())
        });
    }
    group.finish();
}

fn codec(c: &mut Criterion) {
    let digest = digest_of(&amounts(100_000, 4));
    let bytes = digest.to_bytes();
    c.bench_function("codec/encode", |b| b.iter(|| digest.to_bytes()));
    c.bench_function("codec/decode", |b| {
        b.iter_batched(
            || bytes.clone(),
            |bytes| TDigest::from_bytes(&bytes).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn queries(c: &mut Criterion) {
    let digest = digest_of(&amounts(100_000, 5));
    c.bench_function("query/cdf", |b| b.iter(|| digest.cdf(42.0).unwrap()));
    c.bench_function("query/quantile", |b| b.iter(|| digest.quantile(0.99).unwrap()));
}

criterion_group!(benches, update, merge, codec, queries);
criterion_main!(benches);
