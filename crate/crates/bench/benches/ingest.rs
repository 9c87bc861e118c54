//! Backend ingestion of one aggregation window: merging client digests
//! against inserting raw sample batches.

use std::collections::HashMap;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use driftwatch::backend::Backend;
use driftwatch::protocol::{decode_report, encode_report, MemoryStore};
use driftwatch::{Attributes, DigestConfig, GroupSpec, ReferenceDistribution, ReportMessage, SampleBatch, TDigest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

const D: usize = 20_000;
const STREAM_BATCH: usize = 1_000;

fn amounts(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = LogNormal::new(3.5, 1.0).unwrap();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn backend(size: u64, reference: &Arc<ReferenceDistribution>) -> Backend {
    let group = GroupSpec {
        group_id: "all".into(),
        predicate: Attributes::new(),
        aggregation_size: size,
        ks_alert_threshold: 0.03,
        reference_key: "reference".into(),
        digest_config: DigestConfig::default(),
    };
    Backend::new(
        vec![group],
        Arc::new(MemoryStore::new()),
        HashMap::from([("reference".to_string(), reference.clone())]),
    )
    .unwrap()
}

fn window(c: &mut Criterion) {
    let reference = Arc::new(ReferenceDistribution::new(amounts(100_000, 0), DigestConfig::default()).unwrap());
    let mut group = c.benchmark_group("ingest");
    group.sample_size(10);
    for size in [200_000usize, 1_000_000] {
        let values = amounts(size, 1);
        let reports: Vec<Vec<u8>> = values
            .chunks(D)
            .enumerate()
            .map(|(i, chunk)| {
                let mut digest = TDigest::default();
                digest.update_batch(chunk).unwrap();
                encode_report(&ReportMessage::new("device", i as u64, "model", Attributes::new(), &digest, 0).unwrap())
            })
            .collect();
        let batches: Vec<SampleBatch> = values
            .chunks(STREAM_BATCH)
            .enumerate()
            .map(|(i, chunk)| SampleBatch {
                batch_id: format!("batch-{i}"),
                attributes: Attributes::new(),
                values: chunk.to_vec(),
            })
            .collect();
        group.throughput(Throughput::Elements(size as u64));
        group.bench_with_input(BenchmarkId::new("merge", size), &reports, |b, reports| {
            b.iter_batched(
                || backend(size as u64, &reference),
                |backend| {
                    for bytes in reports {
                        backend.process_report(&decode_report(bytes).unwrap()).unwrap();
                    }
                },
                BatchSize::PerIteration,
            )
        });
        group.bench_with_input(BenchmarkId::new("stream", size), &batches, |b, batches| {
            b.iter_batched(
                || backend(size as u64, &reference),
                |backend| {
                    for batch in batches {
                        backend.process_batch(batch).unwrap();
                    }
                },
                BatchSize::PerIteration,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, window);
criterion_main!(benches);
