use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use driftwatch::ks::{ks_digest, ks_digest_vs_reference, ks_exact};
use driftwatch::{DigestConfig, ReferenceDistribution, TDigest};
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

fn statistics(c: &mut Criterion) {
    let mut group = c.benchmark_group("ks");
    for n in [10_000, 100_000] {
        let (a, b) = (amounts(n, 1), amounts(n, 2));
        let (da, db) = (digest_of(&a), digest_of(&b));
        let reference = ReferenceDistribution::new(b.clone(), DigestConfig::default()).unwrap();
        group.bench_with_input(BenchmarkId::new("exact", n), &(&a, &b), |bench, (a, b)| {
            bench.iter(|| ks_exact(a, b).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("digest_pair", n), &(&da, &db), |bench, (da, db)| {
            bench.iter(|| ks_digest(da, db).unwrap())
        });
        group.bench_with_input(
            BenchmarkId::new("digest_vs_reference", n),
            &(&da, &reference),
            |bench, (da, reference)| bench.iter(|| ks_digest_vs_reference(da, reference).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, statistics);
criterion_main!(benches);
