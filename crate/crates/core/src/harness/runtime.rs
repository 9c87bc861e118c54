use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::data::{generate_population, PopulationModel};
use super::{stats, sub_seed, HarnessError};
use crate::backend::{Backend, ConsumerOptions, Inbound, MemoryResults, SampleBatch};
use crate::client::{ClientAgent, ClientConfig};
use crate::ks::ReferenceDistribution;
use crate::protocol::{encode_report, Attributes, GroupSpec, MemoryQueue, MemoryStore, MessageQueue};
use crate::sketch::DigestConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeMode {
    /// Clients send digests; the backend merges them.
    Merge,
    /// Clients send raw sample batches; the backend inserts them.
    Stream,
}

impl fmt::Display for RuntimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuntimeMode::Merge => "merge",
            RuntimeMode::Stream => "stream",
        })
    }
}

impl FromStr for RuntimeMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "merge" => Ok(RuntimeMode::Merge),
            "stream" => Ok(RuntimeMode::Stream),
            other => Err(HarnessError::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

/// Device uplink cost charged per transmitted message, added to measured
/// client CPU time as virtual time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency: Duration,
    pub bandwidth_bytes_per_sec: f64,
}

impl LinkModel {
    /// Free transmission: client timings are CPU only.
    pub fn none() -> Self {
        Self {
            latency: Duration::ZERO,
            bandwidth_bytes_per_sec: f64::INFINITY,
        }
    }

    pub fn transfer_time(&self, bytes: usize) -> Duration {
        self.latency + Duration::from_secs_f64(bytes as f64 / self.bandwidth_bytes_per_sec)
    }
}

impl Default for LinkModel {
    /// A mobile uplink: 10 ms per request, 10 Mbit/s.
    fn default() -> Self {
        Self {
            latency: Duration::from_millis(10),
            bandwidth_bytes_per_sec: 1.25e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub modes: Vec<RuntimeMode>,
    pub sizes: Vec<u64>,
    /// Samples per merge-mode report.
    pub d: u64,
    /// Samples per stream-mode batch.
    pub stream_batch: usize,
    pub repetitions: usize,
    /// Run and discard one repetition before measuring.
    pub warmup: bool,
    pub link: LinkModel,
    pub digest_config: DigestConfig,
    pub reference_size: usize,
    pub seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            modes: vec![RuntimeMode::Merge, RuntimeMode::Stream],
            sizes: vec![125_000, 250_000, 500_000, 1_000_000],
            d: 20_000,
            stream_batch: 1_000,
            repetitions: 10,
            warmup: true,
            link: LinkModel::default(),
            digest_config: DigestConfig::default(),
            reference_size: 100_000,
            seed: 7,
        }
    }
}

/// Backend time from first enqueue to KS completion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeRow {
    pub mode: RuntimeMode,
    pub aggregation_size: u64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

/// Client time for producing and transmitting `aggregation_size` samples,
/// averaged over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRuntimeRow {
    pub mode: RuntimeMode,
    pub aggregation_size: u64,
    /// Samples per message.
    pub message_samples: u64,
    pub messages: u64,
    pub bytes_sent: u64,
    pub cpu_ms: f64,
    pub network_ms: f64,
    pub total_ms: f64,
    pub per_sample_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeReport {
    pub backend: Vec<RuntimeRow>,
    pub client: Vec<ClientRuntimeRow>,
}

impl RuntimeReport {
    pub fn backend_row(&self, mode: RuntimeMode, size: u64) -> Option<&RuntimeRow> {
        self.backend
            .iter()
            .find(|r| r.mode == mode && r.aggregation_size == size)
    }

    pub fn client_row(&self, mode: RuntimeMode, size: u64) -> Option<&ClientRuntimeRow> {
        self.client
            .iter()
            .find(|r| r.mode == mode && r.aggregation_size == size)
    }
}

struct Rep {
    backend: Duration,
    client_cpu: Duration,
    network: Duration,
    messages: u64,
    bytes: u64,
}

fn backend_for(
    config: &RuntimeConfig,
    size: u64,
    reference: &Arc<ReferenceDistribution>,
) -> Result<(Backend, Arc<MemoryResults>), HarnessError> {
    let group = GroupSpec {
        group_id: "all".into(),
        predicate: Attributes::new(),
        aggregation_size: size,
        ks_alert_threshold: 1.0,
        reference_key: "reference".into(),
        digest_config: config.digest_config,
    };
    let results = Arc::new(MemoryResults::new());
    let backend = Backend::new(
        vec![group],
        Arc::new(MemoryStore::new()),
        HashMap::from([("reference".to_string(), Arc::clone(reference))]),
    )?
    .with_recorder(results.clone());
    Ok((backend, results))
}

/// Enqueues every message and consumes until the evaluation completes.
fn time_backend<M: Inbound>(
    backend: &Backend,
    results: &MemoryResults,
    messages: Vec<M>,
) -> Result<Duration, HarnessError> {
    let queue = MemoryQueue::new();
    let start = Instant::now();
    for m in messages {
        queue.enqueue(m);
    }
    let options = ConsumerOptions {
        exit_when_idle: true,
        poll_interval: Duration::from_millis(1),
    };
    let stats = backend.run_consumer(&queue, &AtomicBool::new(false), options);
    let elapsed = start.elapsed();
    if stats.rejected > 0 || results.evaluations().len() != 1 {
        return Err(HarnessError::Conservation(format!(
            "benchmark run ended with {stats:?} and {} evaluations",
            results.evaluations().len()
        )));
    }
    Ok(elapsed)
}

fn merge_rep(
    config: &RuntimeConfig,
    samples: &[f64],
    reference: &Arc<ReferenceDistribution>,
) -> Result<Rep, HarnessError> {
    let mut messages = Vec::new();
    let mut network = Duration::ZERO;
    let mut bytes = 0;
    let start = Instant::now();
    for (c, part) in samples.chunks(config.d as usize).enumerate() {
        let mut client = ClientConfig::new(format!("client{c}"), config.d);
        client.digest_config = config.digest_config;
        let mut agent = ClientAgent::new(client)?.with_clock(|| 0);
        let mut reports = Vec::new();
        for &v in part {
            reports.extend(agent.observe(v)?);
        }
        reports.extend(agent.flush()?);
        for report in reports {
            let payload = encode_report(&report);
            network += config.link.transfer_time(payload.len());
            bytes += payload.len() as u64;
            messages.push(payload);
        }
    }
    let client_cpu = start.elapsed();
    let count = messages.len() as u64;
    let (backend, results) = backend_for(config, samples.len() as u64, reference)?;
    Ok(Rep {
        backend: time_backend(&backend, &results, messages)?,
        client_cpu,
        network,
        messages: count,
        bytes,
    })
}

fn stream_rep(
    config: &RuntimeConfig,
    samples: &[f64],
    reference: &Arc<ReferenceDistribution>,
) -> Result<Rep, HarnessError> {
    let mut messages = Vec::new();
    let mut network = Duration::ZERO;
    let mut bytes = 0;
    let start = Instant::now();
    for (b, chunk) in samples.chunks(config.stream_batch).enumerate() {
        let batch = SampleBatch {
            batch_id: format!("batch{b}"),
            attributes: Attributes::new(),
            values: chunk.to_vec(),
        };
        // Serialize as the wire would carry it.
        let mut payload = Vec::with_capacity(batch.wire_len());
        payload.extend_from_slice(&(batch.batch_id.len() as u32).to_le_bytes());
        payload.extend_from_slice(batch.batch_id.as_bytes());
        payload.extend_from_slice(&0u32.to_le_bytes());
        payload.extend_from_slice(&(chunk.len() as u32).to_le_bytes());
        for v in chunk {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(payload.len(), batch.wire_len());
        network += config.link.transfer_time(payload.len());
        bytes += payload.len() as u64;
        messages.push(batch);
    }
    let client_cpu = start.elapsed();
    let count = messages.len() as u64;
    let (backend, results) = backend_for(config, samples.len() as u64, reference)?;
    Ok(Rep {
        backend: time_backend(&backend, &results, messages)?,
        client_cpu,
        network,
        messages: count,
        bytes,
    })
}

/// Times each mode at each aggregation size.
pub fn run_runtime_benchmark(config: &RuntimeConfig) -> Result<RuntimeReport, HarnessError> {
    if config.sizes.is_empty() || config.modes.is_empty() {
        return Err(HarnessError::InvalidParameter(
            "need at least one mode and one size".into(),
        ));
    }
    if config.d == 0 || config.stream_batch == 0 || config.repetitions == 0 || config.reference_size == 0 {
        return Err(HarnessError::InvalidParameter(
            "d, stream batch, repetitions and reference size must be positive".into(),
        ));
    }
    if config.sizes.contains(&0) {
        return Err(HarnessError::InvalidParameter(
            "aggregation sizes must be positive".into(),
        ));
    }
    let model = PopulationModel::default();
    let reference = generate_population(&model.with_total(config.reference_size), config.seed)?.samples();
    let reference = Arc::new(ReferenceDistribution::new(
        reference[..config.reference_size].to_vec(),
        config.digest_config,
    )?);

    let mut report = RuntimeReport {
        backend: Vec::new(),
        client: Vec::new(),
    };
    for &size in &config.sizes {
        let n = size as usize;
        let population = generate_population(&model.with_total(n), sub_seed(config.seed, &[size]))?;
        let samples = &population.samples()[..n];
        for &mode in &config.modes {
            let rep = || match mode {
                RuntimeMode::Merge => merge_rep(config, samples, &reference),
                RuntimeMode::Stream => stream_rep(config, samples, &reference),
            };
            if config.warmup {
                rep()?;
            }
            let reps = (0..config.repetitions).map(|_| rep()).collect::<Result<Vec<_>, _>>()?;
            let backend_ms: Vec<f64> = reps.iter().map(|r| r.backend.as_secs_f64() * 1e3).collect();
            let cpu_ms: Vec<f64> = reps.iter().map(|r| r.client_cpu.as_secs_f64() * 1e3).collect();
            let network_ms = reps[0].network.as_secs_f64() * 1e3;
            let cpu_ms = stats::mean(&cpu_ms);
            report.backend.push(RuntimeRow {
                mode,
                aggregation_size: size,
                mean_ms: stats::mean(&backend_ms),
                stddev_ms: stats::stddev(&backend_ms),
            });
            report.client.push(ClientRuntimeRow {
                mode,
                aggregation_size: size,
                message_samples: match mode {
                    RuntimeMode::Merge => config.d,
                    RuntimeMode::Stream => config.stream_batch as u64,
                },
                messages: reps[0].messages,
                bytes_sent: reps[0].bytes,
                cpu_ms,
                network_ms,
                total_ms: cpu_ms + network_ms,
                per_sample_us: (cpu_ms + network_ms) * 1e3 / size as f64,
            });
            log::info!("{mode} size {size}: backend {:.1} ms", stats::mean(&backend_ms));
        }
    }
    Ok(report)
}

/// `runtime.csv`: mode, aggregation_size, mean_ms, stddev_ms.
pub fn write_runtime_csv(path: impl AsRef<Path>, rows: &[RuntimeRow]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_client_csv(path: impl AsRef<Path>, rows: &[ClientRuntimeRow]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_model() {
        let link = LinkModel::default();
        assert_eq!(link.transfer_time(1_250_000), Duration::from_millis(1_010));
        assert_eq!(LinkModel::none().transfer_time(1 << 30), Duration::ZERO);
    }

    #[test]
    fn small_benchmark_writes_rows() {
        let config = RuntimeConfig {
            sizes: vec![10_000, 20_000],
            d: 5_000,
            repetitions: 2,
            warmup: false,
            reference_size: 5_000,
            ..RuntimeConfig::default()
        };
        let report = run_runtime_benchmark(&config).unwrap();
        assert_eq!(report.backend.len(), 4);
        let merge = report.client_row(RuntimeMode::Merge, 20_000).unwrap();
        assert_eq!(merge.messages, 4);
        let stream = report.client_row(RuntimeMode::Stream, 20_000).unwrap();
        assert_eq!(stream.messages, 20);
        let ids: u64 = (0..20).map(|b| format!("batch{b}").len() as u64).sum();
        assert_eq!(stream.bytes_sent, ids + 20 * (4 + 4 + 4 + 8_000));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runtime.csv");
        write_runtime_csv(&path, &report.backend).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("mode,aggregation_size,mean_ms,stddev_ms\nmerge,10000,"));
        assert_eq!(text.lines().count(), 5);
        write_client_csv(dir.path().join("client.csv"), &report.client).unwrap();
    }
}
