use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{apply_shift, generate_population, PopulationModel, ShiftScenario};
use super::{sub_seed, HarnessError};
use crate::backend::{
    AlertEvent, AlertLog, AlertSink, Backend, CallbackSink, ConsumerOptions, ConsumerStats, CsvResultsLog, Evaluation,
    MemoryResults,
};
use crate::client::{ClientAgent, ClientConfig};
use crate::ks::ReferenceDistribution;
use crate::protocol::{attributes, encode_report, example_groups, GroupSpec, MemoryQueue, MemoryStore, MessageQueue};
use crate::sketch::DigestConfig;

pub struct FleetConfig {
    pub n_clients: usize,
    /// Spending model shared by clients and the reference; per-user
    /// spread is zero by default so every group matches the one reference.
    pub model: PopulationModel,
    pub d: u64,
    pub samples_per_client: usize,
    pub groups: Vec<GroupSpec>,
    pub consumers: usize,
    /// Applied to the second half of every client's stream.
    pub shift: Option<ShiftScenario>,
    pub reference_size: usize,
    pub seed: u64,
    /// Where `alerts.log` and `ks_results.csv` are appended, if anywhere.
    pub out_dir: Option<PathBuf>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            model: PopulationModel {
                location_sd: 0.0,
                ..PopulationModel::default()
            },
            d: 1_000,
            samples_per_client: 2_000,
            groups: example_groups(50_000, 0.03, "reference"),
            consumers: 4,
            shift: None,
            reference_size: 100_000,
            seed: 7,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FleetSummary {
    pub stats: ConsumerStats,
    pub evaluations: Vec<Evaluation>,
    pub samples_observed: u64,
    pub reports_sent: u64,
    /// Samples still aggregating per group when the run ended.
    pub residual: BTreeMap<String, f64>,
}

const GENDERS: [&str; 2] = ["male", "female"];
const LOCATIONS: [&str; 4] = ["NY", "LA", "SF", "CHI"];

/// Runs a fleet of client threads against concurrent backend consumers,
/// passing each alert to `on_alert` as it fires.
pub fn simulate<F>(config: &FleetConfig, on_alert: F) -> Result<FleetSummary, HarnessError>
where
    F: Fn(&AlertEvent) + Send + Sync + 'static,
{
    if config.n_clients == 0 || config.consumers == 0 || config.d == 0 || config.reference_size == 0 {
        return Err(HarnessError::InvalidParameter(
            "clients, consumers, d and reference size must be positive".into(),
        ));
    }
    if let Some(shift) = &config.shift {
        shift.validate()?;
    }
    let model = config.model;
    let reference = generate_population(&model.with_total(config.reference_size), sub_seed(config.seed, &[0]))?;
    let reference = ReferenceDistribution::new(
        reference.samples()[..config.reference_size].to_vec(),
        DigestConfig::default(),
    )?;

    let fleet_model = PopulationModel {
        n_users: config.n_clients,
        samples_per_user: config.samples_per_client,
        ..model
    };
    let base = generate_population(&fleet_model, sub_seed(config.seed, &[1]))?;
    let shifted = match &config.shift {
        Some(shift) => apply_shift(&base, shift)?,
        None => base.clone(),
    };
    let half = config.samples_per_client / 2;
    let streams: Vec<Vec<f64>> = base
        .streams
        .iter()
        .zip(&shifted.streams)
        .map(|(before, after)| before[..half].iter().chain(&after[half..]).copied().collect())
        .collect();

    let alert_log = match &config.out_dir {
        Some(dir) => Some(AlertLog::open(dir.join("alerts.log"))?),
        None => None,
    };
    let sink: Arc<dyn AlertSink> = Arc::new(CallbackSink(move |event: &AlertEvent| {
        if let Some(log) = &alert_log {
            log.alert(event);
        }
        on_alert(event);
    }));
    let results = Arc::new(MemoryResults::new());
    let mut backend = Backend::new(
        config.groups.clone(),
        Arc::new(MemoryStore::new()),
        HashMap::from([("reference".to_string(), Arc::new(reference))]),
    )?
    .with_sink(sink)
    .with_recorder(results.clone());
    if let Some(dir) = &config.out_dir {
        backend = backend.with_recorder(Arc::new(CsvResultsLog::open(dir.join("ks_results.csv"))?));
    }

    let queue: MemoryQueue<Vec<u8>> = MemoryQueue::new();
    let stop = AtomicBool::new(false);
    let mut attr_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &[2]));
    let client_attrs: Vec<_> = (0..config.n_clients)
        .map(|_| {
            let gender = *GENDERS.choose(&mut attr_rng).expect("non-empty");
            let location = *LOCATIONS.choose(&mut attr_rng).expect("non-empty");
            let age = attr_rng.random_range(18..=80).to_string();
            attributes([("gender", gender), ("age", age.as_str()), ("location", location)])
        })
        .collect();

    let (reports_sent, stats) = std::thread::scope(|scope| -> Result<(u64, ConsumerStats), HarnessError> {
        let consumers: Vec<_> = (0..config.consumers)
            .map(|_| scope.spawn(|| backend.run_consumer(&queue, &stop, ConsumerOptions::default())))
            .collect();
        let clients: Vec<_> = streams
            .iter()
            .zip(&client_attrs)
            .enumerate()
            .map(|(i, (stream, attrs))| {
                let queue = &queue;
                scope.spawn(move || -> Result<u64, HarnessError> {
                    let mut client = ClientConfig::new(format!("device{i:05}"), config.d);
                    client.attributes = attrs.clone();
                    let mut agent = ClientAgent::new(client)?;
                    let mut sent = 0;
                    for &v in stream {
                        if let Some(report) = agent.observe(v)? {
                            queue.enqueue(encode_report(&report));
                            sent += 1;
                        }
                    }
                    if let Some(report) = agent.flush()? {
                        queue.enqueue(encode_report(&report));
                        sent += 1;
                    }
                    Ok(sent)
                })
            })
            .collect();
        let mut sent = 0;
        let mut failure = None;
        for client in clients {
            match client.join().expect("client thread panicked") {
                Ok(n) => sent += n,
                Err(e) => failure = Some(e),
            }
        }
        while !queue.is_idle() {
            std::thread::sleep(Duration::from_millis(5));
        }
        stop.store(true, Ordering::Release);
        let mut stats = ConsumerStats::default();
        for consumer in consumers {
            stats += consumer.join().expect("consumer thread panicked");
        }
        match failure {
            Some(e) => Err(e),
            None => Ok((sent, stats)),
        }
    })?;

    let mut residual = BTreeMap::new();
    for group in &config.groups {
        let weight = backend
            .group_state(&group.group_id)?
            .map_or(0.0, |s| s.samples_accumulated);
        residual.insert(group.group_id.clone(), weight);
    }
    Ok(FleetSummary {
        stats,
        evaluations: results.evaluations(),
        samples_observed: streams.iter().map(|s| s.len() as u64).sum(),
        reports_sent,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditConfig {
    pub consumers: usize,
    pub reports: usize,
    pub samples_per_report: u64,
    pub aggregation_size: u64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            consumers: 8,
            reports: 200,
            samples_per_report: 1_000,
            aggregation_size: 50_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub total_samples: u64,
    /// Samples covered by triggered evaluations.
    pub window_samples: u64,
    pub residual: f64,
    pub evaluations: usize,
    pub stats: ConsumerStats,
    pub elapsed: Duration,
}

impl AuditReport {
    pub fn conserved(&self) -> bool {
        self.window_samples as f64 + self.residual == self.total_samples as f64
    }
}

/// Many consumers racing on one group: every reported sample must end up
/// either in an evaluated window or in the residual aggregate.
pub fn run_conservation_audit(config: &AuditConfig) -> Result<AuditReport, HarnessError> {
    if config.consumers == 0 || config.reports == 0 || config.samples_per_report == 0 || config.aggregation_size == 0 {
        return Err(HarnessError::InvalidParameter(
            "audit parameters must be positive".into(),
        ));
    }
    let model = PopulationModel {
        n_users: config.reports,
        samples_per_user: config.samples_per_report as usize,
        ..PopulationModel::default()
    };
    let population = generate_population(&model, config.seed)?;
    let reference = ReferenceDistribution::new(
        population.resample(sub_seed(config.seed, &[1])).samples(),
        DigestConfig::default(),
    )?;
    let mut group = example_groups(config.aggregation_size, 0.03, "reference").remove(0);
    group.group_id = "all".into();
    let results = Arc::new(MemoryResults::new());
    let backend = Backend::new(
        vec![group],
        Arc::new(MemoryStore::new()),
        HashMap::from([("reference".to_string(), Arc::new(reference))]),
    )?
    .with_recorder(results.clone());

    let queue: MemoryQueue<Vec<u8>> = MemoryQueue::new();
    let mut total_samples = 0;
    for (i, stream) in population.streams.iter().enumerate() {
        let mut agent = ClientAgent::new(ClientConfig::new(format!("device{i:05}"), config.samples_per_report))?;
        for &v in stream {
            if let Some(report) = agent.observe(v)? {
                total_samples += report.sample_count;
                queue.enqueue(encode_report(&report));
            }
        }
    }

    let start = Instant::now();
    let stop = AtomicBool::new(false);
    let options = ConsumerOptions {
        exit_when_idle: true,
        poll_interval: Duration::from_millis(1),
    };
    let stats = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.consumers)
            .map(|_| scope.spawn(|| backend.run_consumer(&queue, &stop, options)))
            .collect();
        let mut stats = ConsumerStats::default();
        for h in handles {
            stats += h.join().expect("consumer thread panicked");
        }
        stats
    });
    let elapsed = start.elapsed();

    let evaluations = results.evaluations();
    Ok(AuditReport {
        total_samples,
        window_samples: evaluations.iter().map(|e| e.window_samples).sum(),
        residual: backend.group_state("all")?.map_or(0.0, |s| s.samples_accumulated),
        evaluations: evaluations.len(),
        stats,
        elapsed,
    })
}
