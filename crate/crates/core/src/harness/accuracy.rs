use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{apply_shift, generate_population, Population, PopulationModel, ShiftKind, ShiftScenario};
use super::{stats, sub_seed, HarnessError};
use crate::backend::{Backend, ConsumerOptions, MemoryResults, ReferenceMode};
use crate::client::{ClientAgent, ClientConfig};
use crate::ks::{ks_exact, ReferenceDistribution};
use crate::protocol::{encode_report, GroupSpec, MemoryQueue, MemoryStore, MessageQueue};
use crate::sketch::DigestConfig;

/// Degree used by the immediate-shift grid: affected users spend four
/// times their usual amounts.
pub const IMMEDIATE_DEGREE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(PopulationModel),
    /// Observed amounts (e.g. from CSV); trials draw disjoint random halves.
    Observed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ShiftKind,
    pub degree: f64,
    pub affected_fraction: f64,
}

/// The default grid for a shift kind.
pub fn default_scenarios(kind: ShiftKind) -> Vec<ScenarioSpec> {
    match kind {
        ShiftKind::Graded => [1.0, 1.1, 1.25, 1.5, 2.0]
            .into_iter()
            .map(|degree| ScenarioSpec {
                kind,
                degree,
                affected_fraction: 0.3,
            })
            .collect(),
        ShiftKind::Immediate => [0.01, 0.05, 0.1, 0.2, 0.4]
            .into_iter()
            .map(|affected_fraction| ScenarioSpec {
                kind,
                degree: IMMEDIATE_DEGREE,
                affected_fraction,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyConfig {
    pub source: DataSource,
    pub scenarios: Vec<ScenarioSpec>,
    pub trials: usize,
    pub n_per_side: usize,
    pub digest_config: DigestConfig,
    pub n_clients: usize,
    /// Client report threshold.
    pub d: u64,
    pub alert_threshold: f64,
    /// Pseudo-user size when shifting observed data per user.
    pub samples_per_user: usize,
    pub reference_mode: ReferenceMode,
    pub seed: u64,
    /// Run trials on the rayon pool.
    pub parallel: bool,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(PopulationModel::default()),
            scenarios: vec![ScenarioSpec {
                kind: ShiftKind::Graded,
                degree: 1.0,
                affected_fraction: 0.3,
            }],
            trials: 15,
            n_per_side: 100_000,
            digest_config: DigestConfig::default(),
            n_clients: 10,
            d: 20_000,
            alert_threshold: 0.03,
            samples_per_user: 100,
            reference_mode: ReferenceMode::Exact,
            seed: 7,
            parallel: true,
        }
    }
}

impl AccuracyConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidParameter(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if self.n_per_side == 0 {
            return bad("n_per_side must be positive");
        }
        if self.n_clients == 0 {
            return bad("n_clients must be positive");
        }
        if self.d == 0 {
            return bad("d must be positive");
        }
        if !(self.alert_threshold > 0.0 && self.alert_threshold <= 1.0) {
            return bad("alert threshold must be in (0, 1]");
        }
        if self.samples_per_user == 0 {
            return bad("samples_per_user must be positive");
        }
        self.digest_config
            .validate()
            .map_err(|e| HarnessError::InvalidParameter(e.to_string()))?;
        for s in &self.scenarios {
            ShiftScenario {
                kind: s.kind,
                degree: s.degree,
                affected_fraction: s.affected_fraction,
                seed: 0,
            }
            .validate()?;
        }
        match &self.source {
            DataSource::Synthetic(model) => model.validate(),
            DataSource::Observed(values) if values.len() < 2 * self.n_per_side => {
                Err(HarnessError::InsufficientSamples {
                    needed: 2 * self.n_per_side,
                    available: values.len(),
                })
            }
            DataSource::Observed(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub generate_ms: f64,
    pub exact_ms: f64,
    pub clients_ms: f64,
    pub backend_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub scenario: ScenarioSpec,
    pub optimal_ks: f64,
    pub digest_ks: f64,
    pub abs_error: f64,
    pub n_samples: usize,
    /// Samples in the window that triggered the evaluation.
    pub window_samples: u64,
    pub alerted: bool,
    pub times: PhaseTimes,
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Reference and (shifted) new data for one trial.
fn trial_data(
    config: &AccuracyConfig,
    scenario: &ScenarioSpec,
    trial: usize,
) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    let n = config.n_per_side;
    let base_seed = sub_seed(config.seed, &[trial as u64]);
    let shift = ShiftScenario {
        kind: scenario.kind,
        degree: scenario.degree,
        affected_fraction: scenario.affected_fraction,
        seed: sub_seed(config.seed, &[trial as u64, 1]),
    };
    let (reference, fresh) = match &config.source {
        DataSource::Synthetic(model) => {
            let model = model.with_total(n);
            let population = generate_population(&model, base_seed)?;
            let fresh = population.resample(sub_seed(base_seed, &[2]));
            (population.samples(), fresh)
        }
        DataSource::Observed(values) => {
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(base_seed));
            let fresh = Population::from_samples(&shuffled[n..2 * n], config.samples_per_user);
            shuffled.truncate(n);
            (shuffled, fresh)
        }
    };
    let mut new = apply_shift(&fresh, &shift)?.samples();
    let mut reference = reference;
    reference.truncate(n);
    new.truncate(n);
    Ok((reference, new))
}

struct PipelineResult {
    digest_ks: f64,
    window_samples: u64,
    alerted: bool,
    clients_ms: f64,
    backend_ms: f64,
}

/// Streams `new` through `n_clients` agents, the queue and one backend
/// consumer with a single catch-all group of size `new.len()`.
fn run_pipeline(
    config: &AccuracyConfig,
    reference: ReferenceDistribution,
    new: &[f64],
) -> Result<PipelineResult, HarnessError> {
    let group = GroupSpec {
        group_id: "all".into(),
        predicate: Default::default(),
        aggregation_size: new.len() as u64,
        ks_alert_threshold: config.alert_threshold,
        reference_key: "reference".into(),
        digest_config: config.digest_config,
    };
    let results = Arc::new(MemoryResults::new());
    let backend = Backend::new(
        vec![group],
        Arc::new(MemoryStore::new()),
        HashMap::from([("reference".to_string(), Arc::new(reference))]),
    )?
    .with_reference_mode(config.reference_mode)
    .with_recorder(results.clone());
    let queue: MemoryQueue<Vec<u8>> = MemoryQueue::new();

    let start = Instant::now();
    let n_clients = config.n_clients.min(new.len());
    for c in 0..n_clients {
        let part = &new[c * new.len() / n_clients..(c + 1) * new.len() / n_clients];
        let mut client = ClientConfig::new(format!("client{c}"), config.d);
        client.digest_config = config.digest_config;
        let mut agent = ClientAgent::new(client)?.with_clock(|| 0);
        for &v in part {
            if let Some(report) = agent.observe(v)? {
                queue.enqueue(encode_report(&report));
            }
        }
        if let Some(report) = agent.flush()? {
            queue.enqueue(encode_report(&report));
        }
    }
    let clients_ms = ms_since(start);

    let start = Instant::now();
    let options = ConsumerOptions {
        exit_when_idle: true,
        ..ConsumerOptions::default()
    };
    let consumer = backend.run_consumer(&queue, &AtomicBool::new(false), options);
    let backend_ms = ms_since(start);
    if consumer.rejected > 0 || consumer.nacked > 0 {
        return Err(HarnessError::Conservation(format!(
            "consumer failed messages: {consumer:?}"
        )));
    }
    let evaluations = results.evaluations();
    let [evaluation] = evaluations.as_slice() else {
        return Err(HarnessError::Conservation(format!(
            "expected one evaluation, got {}",
            evaluations.len()
        )));
    };
    if evaluation.window_samples != new.len() as u64 {
        return Err(HarnessError::Conservation(format!(
            "observed {} samples but the window held {}",
            new.len(),
            evaluation.window_samples
        )));
    }
    Ok(PipelineResult {
        digest_ks: evaluation.ks.statistic,
        window_samples: evaluation.window_samples,
        alerted: evaluation.alerted,
        clients_ms,
        backend_ms,
    })
}

fn run_trial(config: &AccuracyConfig, scenario: &ScenarioSpec, trial: usize) -> Result<TrialRecord, HarnessError> {
    let start = Instant::now();
    let (reference, new) = trial_data(config, scenario, trial)?;
    let generate_ms = ms_since(start);

    let start = Instant::now();
    let optimal_ks = ks_exact(&reference, &new)?;
    let exact_ms = ms_since(start);

    let reference = ReferenceDistribution::new(reference, config.digest_config)?;
    let pipeline = run_pipeline(config, reference, &new)?;
    Ok(TrialRecord {
        trial_index: trial,
        scenario: *scenario,
        optimal_ks,
        digest_ks: pipeline.digest_ks,
        abs_error: (optimal_ks - pipeline.digest_ks).abs(),
        n_samples: new.len(),
        window_samples: pipeline.window_samples,
        alerted: pipeline.alerted,
        times: PhaseTimes {
            generate_ms,
            exact_ms,
            clients_ms: pipeline.clients_ms,
            backend_ms: pipeline.backend_ms,
        },
    })
}

/// Every scenario times every trial, in that order.
pub fn run_accuracy_experiment(config: &AccuracyConfig) -> Result<Vec<TrialRecord>, HarnessError> {
    config.validate()?;
    let jobs: Vec<(ScenarioSpec, usize)> = config
        .scenarios
        .iter()
        .flat_map(|s| (0..config.trials).map(move |t| (*s, t)))
        .collect();
    let run = |(scenario, trial): &(ScenarioSpec, usize)| run_trial(config, scenario, *trial);
    if config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

#[derive(Serialize)]
struct AccuracyRow {
    trial_index: usize,
    scenario_kind: String,
    degree: f64,
    affected_fraction: f64,
    n_samples: usize,
    optimal_ks: f64,
    digest_ks: f64,
    abs_error: f64,
}

pub fn write_accuracy_csv(path: impl AsRef<Path>, records: &[TrialRecord]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(AccuracyRow {
            trial_index: r.trial_index,
            scenario_kind: r.scenario.kind.to_string(),
            degree: r.scenario.degree,
            affected_fraction: r.scenario.affected_fraction,
            n_samples: r.n_samples,
            optimal_ks: r.optimal_ks,
            digest_ks: r.digest_ks,
            abs_error: r.abs_error,
        })?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub scenario: ScenarioSpec,
    pub trials: usize,
    pub median_abs_error: f64,
    pub max_abs_error: f64,
    pub mean_optimal_ks: f64,
    pub min_optimal_ks: f64,
    pub mean_digest_ks: f64,
    pub alerts: usize,
}

/// Per-scenario aggregates, in first-seen scenario order.
pub fn summarize(records: &[TrialRecord]) -> Vec<ScenarioSummary> {
    let mut order: Vec<ScenarioSpec> = Vec::new();
    for r in records {
        if !order.contains(&r.scenario) {
            order.push(r.scenario);
        }
    }
    order
        .into_iter()
        .map(|scenario| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.scenario == scenario).collect();
            let errors: Vec<f64> = rs.iter().map(|r| r.abs_error).collect();
            let optimal: Vec<f64> = rs.iter().map(|r| r.optimal_ks).collect();
            let digest: Vec<f64> = rs.iter().map(|r| r.digest_ks).collect();
            ScenarioSummary {
                scenario,
                trials: rs.len(),
                median_abs_error: stats::median(&errors),
                max_abs_error: stats::max(&errors),
                mean_optimal_ks: stats::mean(&optimal),
                min_optimal_ks: optimal.iter().copied().fold(f64::INFINITY, f64::min),
                mean_digest_ks: stats::mean(&digest),
                alerts: rs.iter().filter(|r| r.alerted).count(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(n_clients: usize) -> AccuracyConfig {
        AccuracyConfig {
            scenarios: vec![ScenarioSpec {
                kind: ShiftKind::Graded,
                degree: 1.5,
                affected_fraction: 0.3,
            }],
            trials: 2,
            n_per_side: 20_000,
            n_clients,
            d: 3_000,
            ..AccuracyConfig::default()
        }
    }

    #[test]
    fn trials_are_reproducible_and_conserve_samples() {
        let a = run_accuracy_experiment(&quick(4)).unwrap();
        let b = run_accuracy_experiment(&quick(4)).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.optimal_ks.to_bits(), y.optimal_ks.to_bits());
            assert_eq!(x.digest_ks.to_bits(), y.digest_ks.to_bits());
            assert_eq!(x.window_samples, 20_000);
            assert_eq!(x.abs_error, (x.optimal_ks - x.digest_ks).abs());
        }
    }

    #[test]
    fn observed_source_needs_two_sides() {
        let mut config = quick(1);
        config.source = DataSource::Observed(vec![1.0; 30_000]);
        assert!(matches!(
            run_accuracy_experiment(&config),
            Err(HarnessError::InsufficientSamples { needed: 40_000, .. })
        ));
        config.source = DataSource::Observed((0..40_000).map(|i| f64::from(i % 1_000) + 0.5).collect());
        let records = run_accuracy_experiment(&config).unwrap();
        assert!(records.iter().all(|r| r.abs_error < 0.01));
    }

    #[test]
    fn csv_output() {
        let records = run_accuracy_experiment(&quick(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("accuracy.csv");
        write_accuracy_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "trial_index,scenario_kind,degree,affected_fraction,n_samples,optimal_ks,digest_ks,abs_error"
        );
        assert!(lines.next().unwrap().starts_with("0,graded,1.5,0.3,20000,"));
        assert_eq!(lines.count(), 1);
        let summary = summarize(&records);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].trials, 2);
    }
}
