//! Queue consumer: routes reports to monitored groups, merges them into
//! per-group aggregates under optimistic locking, and runs the KS test when
//! a group's aggregate reaches its aggregation size.

mod alert;
mod dedup;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use thiserror::Error;

use crate::ks::{ks_digest_vs_reference, ks_digest_vs_reference_digest, KsError, KsResult, ReferenceDistribution};
use crate::protocol::{
    decode_report, match_groups, now_ms, Attributes, GroupSpec, MessageQueue, ProtocolError, ReportMessage, Version,
    VersionedStore,
};
use crate::sketch::{DigestConfig, SketchError, TDigest};

pub use alert::{
    evaluate_and_alert, AlertEvent, AlertLog, AlertSink, CallbackSink, CollectingSink, CsvResultsLog, Evaluation,
    MemoryResults, ResultRecorder,
};
use dedup::DedupCache;

pub const DEFAULT_CAS_ATTEMPTS: u32 = 32;
pub const DEFAULT_DEDUP_CAPACITY: usize = 65_536;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("undecodable report: {0}")]
    Decode(#[from] ProtocolError),
    #[error("group {group_id} expects digest config {expected:?}, report carries {actual:?}")]
    ConfigMismatch {
        group_id: String,
        expected: DigestConfig,
        actual: DigestConfig,
    },
    #[error("gave up on group {group_id} after {attempts} conflicting writes")]
    CasExhausted { group_id: String, attempts: u32 },
    #[error("stored aggregate for group {group_id} is unreadable: {source}")]
    CorruptState { group_id: String, source: SketchError },
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Ks(#[from] KsError),
    #[error("invalid backend setup: {0}")]
    InvalidSetup(String),
}

impl BackendError {
    /// Worth redelivering: nothing was committed for the failing group and
    /// a later attempt may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::CasExhausted { .. })
    }
}

/// Which side of the reference the KS test reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceMode {
    /// Raw reference samples.
    #[default]
    Exact,
    /// The reference's digest, for memory-constrained deployments.
    Digest,
}

/// A group's stored aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub group_id: String,
    pub aggregate: TDigest,
    pub version: Version,
    pub samples_accumulated: f64,
}

pub fn group_key(group_id: &str) -> String {
    format!("group/{group_id}/aggregate")
}

/// Raw samples sent in place of a digest (the streaming baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub batch_id: String,
    pub attributes: Attributes,
    pub values: Vec<f64>,
}

impl SampleBatch {
    /// Bytes on the wire: the id and attributes plus 8 bytes per sample.
    pub fn wire_len(&self) -> usize {
        let attrs: usize = self.attributes.iter().map(|(k, v)| 8 + k.len() + v.len()).sum();
        4 + self.batch_id.len() + 4 + attrs + 4 + 8 * self.values.len()
    }
}

/// What one message did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProcessOutcome {
    pub results: Vec<KsResult>,
    pub alerts: u64,
    pub cas_conflicts: u64,
    /// Groups skipped because this message was already applied to them.
    pub duplicates: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConsumerStats {
    pub processed: u64,
    pub rejected: u64,
    pub nacked: u64,
    pub ks_evaluations: u64,
    pub alerts: u64,
    pub cas_conflicts: u64,
}

impl std::ops::AddAssign for ConsumerStats {
    fn add_assign(&mut self, other: Self) {
        self.processed += other.processed;
        self.rejected += other.rejected;
        self.nacked += other.nacked;
        self.ks_evaluations += other.ks_evaluations;
        self.alerts += other.alerts;
        self.cas_conflicts += other.cas_conflicts;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsumerOptions {
    /// How long one dequeue waits before re-checking the stop flag.
    pub poll_interval: Duration,
    /// Return as soon as the queue holds no ready or in-flight messages.
    pub exit_when_idle: bool,
}

impl Default for ConsumerOptions {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_millis(20),
            exit_when_idle: false,
        }
    }
}

/// A queue payload the backend knows how to apply.
pub trait Inbound: Clone + Send {
    fn apply(&self, backend: &Backend) -> Result<ProcessOutcome, BackendError>;
}

/// `RPT1`-encoded report bytes.
impl Inbound for Vec<u8> {
    fn apply(&self, backend: &Backend) -> Result<ProcessOutcome, BackendError> {
        let report = decode_report(self)?;
        backend.process_report(&report)
    }
}

impl Inbound for SampleBatch {
    fn apply(&self, backend: &Backend) -> Result<ProcessOutcome, BackendError> {
        backend.process_batch(self)
    }
}

struct Commit {
    /// The aggregate that crossed the aggregation size, if this write reset
    /// the group.
    window: Option<TDigest>,
    conflicts: u64,
}

/// Shared processing state; one instance serves any number of consumers.
pub struct Backend {
    groups: Vec<GroupSpec>,
    store: Arc<dyn VersionedStore>,
    references: HashMap<String, Arc<ReferenceDistribution>>,
    reference_mode: ReferenceMode,
    sink: Option<Arc<dyn AlertSink>>,
    recorders: Vec<Arc<dyn ResultRecorder>>,
    cas_attempts: u32,
    backoff: Duration,
    dedup: DedupCache,
}

impl Backend {
    pub fn new(
        groups: Vec<GroupSpec>,
        store: Arc<dyn VersionedStore>,
        references: HashMap<String, Arc<ReferenceDistribution>>,
    ) -> Result<Self, BackendError> {
        let mut ids = std::collections::HashSet::new();
        for group in &groups {
            group.validate()?;
            if !ids.insert(group.group_id.as_str()) {
                return Err(BackendError::InvalidSetup(format!(
                    "duplicate group id {}",
                    group.group_id
                )));
            }
            if !references.contains_key(&group.reference_key) {
                log::warn!(
                    "group {} references unknown distribution {}; it will be skipped",
                    group.group_id,
                    group.reference_key
                );
            }
        }
        Ok(Self {
            groups,
            store,
            references,
            reference_mode: ReferenceMode::Exact,
            sink: None,
            recorders: Vec::new(),
            cas_attempts: DEFAULT_CAS_ATTEMPTS,
            backoff: Duration::from_micros(50),
            dedup: DedupCache::new(DEFAULT_DEDUP_CAPACITY),
        })
    }

    pub fn with_reference_mode(mut self, mode: ReferenceMode) -> Self {
        self.reference_mode = mode;
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn AlertSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn with_recorder(mut self, recorder: Arc<dyn ResultRecorder>) -> Self {
        self.recorders.push(recorder);
        self
    }

    /// Conditional writes tried per group before giving up on a message.
    pub fn with_cas_attempts(mut self, attempts: u32) -> Self {
        self.cas_attempts = attempts.max(1);
        self
    }

    /// Base of the jittered exponential backoff between conflicting writes.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    /// Size of the (report, group) duplicate filter; 0 disables it.
    pub fn with_dedup_capacity(mut self, capacity: usize) -> Self {
        self.dedup = DedupCache::new(capacity);
        self
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn store(&self) -> &Arc<dyn VersionedStore> {
        &self.store
    }

    pub fn group_state(&self, group_id: &str) -> Result<Option<GroupState>, BackendError> {
        let Some(stored) = self.store.get(&group_key(group_id)) else {
            return Ok(None);
        };
        let aggregate = TDigest::from_bytes(&stored.value).map_err(|source| BackendError::CorruptState {
            group_id: group_id.to_string(),
            source,
        })?;
        Ok(Some(GroupState {
            group_id: group_id.to_string(),
            samples_accumulated: aggregate.total_weight(),
            aggregate,
            version: stored.version,
        }))
    }

    /// Merges the report's digest into every matching group, evaluating and
    /// resetting each group that reaches its aggregation size.
    pub fn process_report(&self, report: &ReportMessage) -> Result<ProcessOutcome, BackendError> {
        let matched = self.matched(&report.attributes);
        if matched.is_empty() {
            return Ok(ProcessOutcome::default());
        }
        let digest = report.digest()?;
        for spec in &matched {
            if spec.digest_config != digest.config() {
                return Err(BackendError::ConfigMismatch {
                    group_id: spec.group_id.clone(),
                    expected: spec.digest_config,
                    actual: digest.config(),
                });
            }
        }
        self.apply_to_groups(&report.report_id, &matched, |aggregate| aggregate.merge(&digest))
    }

    /// Inserts raw samples into every matching group.
    pub fn process_batch(&self, batch: &SampleBatch) -> Result<ProcessOutcome, BackendError> {
        let matched = self.matched(&batch.attributes);
        if let Some(bad) = batch.values.iter().find(|v| !v.is_finite()) {
            return Err(SketchError::NonFiniteValue(*bad).into());
        }
        self.apply_to_groups(&batch.batch_id, &matched, |aggregate| {
            let mut next = aggregate.clone();
            next.update_batch(&batch.values)?;
            Ok(next)
        })
    }

    fn matched(&self, attributes: &Attributes) -> Vec<&GroupSpec> {
        let ids = match_groups(attributes, &self.groups);
        let by_id: HashMap<&str, &GroupSpec> = self.groups.iter().map(|g| (g.group_id.as_str(), g)).collect();
        ids.iter().map(|id| by_id[id.as_str()]).collect()
    }

    fn apply_to_groups<F>(
        &self,
        message_id: &str,
        groups: &[&GroupSpec],
        combine: F,
    ) -> Result<ProcessOutcome, BackendError>
    where
        F: Fn(&TDigest) -> Result<TDigest, SketchError>,
    {
        let mut outcome = ProcessOutcome::default();
        for spec in groups {
            let Some(reference) = self.references.get(&spec.reference_key) else {
                log::warn!(
                    "skipping group {}: unknown reference distribution {}",
                    spec.group_id,
                    spec.reference_key
                );
                continue;
            };
            if !self.dedup.claim(message_id, &spec.group_id) {
                log::debug!("{message_id} already applied to {}", spec.group_id);
                outcome.duplicates += 1;
                continue;
            }
            let commit = match self.commit(spec, &combine) {
                Ok(commit) => commit,
                Err(e) => {
                    self.dedup.release(message_id, &spec.group_id);
                    return Err(e);
                }
            };
            outcome.cas_conflicts += commit.conflicts;
            let Some(window) = commit.window else {
                continue;
            };
            let mut result = match self.reference_mode {
                ReferenceMode::Exact => ks_digest_vs_reference(&window, reference)?,
                ReferenceMode::Digest => ks_digest_vs_reference_digest(&window, reference)?,
            };
            result.group_id = Some(spec.group_id.clone());
            let recorders: Vec<&dyn ResultRecorder> = self.recorders.iter().map(|r| r.as_ref()).collect();
            if evaluate_and_alert(&result, spec, self.sink.as_deref(), &recorders, now_ms()).is_some() {
                outcome.alerts += 1;
            }
            outcome.results.push(result);
        }
        Ok(outcome)
    }

    /// Read, combine, conditionally write; retried from a fresh read on
    /// conflict so a message is never folded in twice.
    fn commit<F>(&self, spec: &GroupSpec, combine: &F) -> Result<Commit, BackendError>
    where
        F: Fn(&TDigest) -> Result<TDigest, SketchError>,
    {
        let key = group_key(&spec.group_id);
        let mut conflicts = 0;
        for attempt in 0..self.cas_attempts {
            if attempt > 0 {
                self.sleep_backoff(attempt);
            }
            let current = self.store.get(&key);
            let aggregate = match &current {
                Some(stored) => TDigest::from_bytes(&stored.value).map_err(|source| BackendError::CorruptState {
                    group_id: spec.group_id.clone(),
                    source,
                })?,
                None => TDigest::new(spec.digest_config)?,
            };
            let combined = combine(&aggregate)?;
            let triggered = combined.total_weight() >= spec.aggregation_size as f64;
            let next = if triggered {
                TDigest::new(spec.digest_config)?.to_bytes()
            } else {
                combined.to_bytes()
            };
            let written = match &current {
                Some(stored) => self.store.put_if_version(&key, next, stored.version),
                None => self.store.put_new(&key, next),
            };
            match written {
                Ok(_) => {
                    return Ok(Commit {
                        window: triggered.then_some(combined),
                        conflicts,
                    })
                }
                Err(e) => {
                    log::trace!("{e}");
                    conflicts += 1;
                }
            }
        }
        Err(BackendError::CasExhausted {
            group_id: spec.group_id.clone(),
            attempts: self.cas_attempts,
        })
    }

    fn sleep_backoff(&self, attempt: u32) {
        let ceiling = self.backoff.as_nanos() as u64 * (1u64 << attempt.min(8));
        if ceiling == 0 {
            std::thread::yield_now();
            return;
        }
        let nanos = rand::rng().random_range(0..ceiling);
        std::thread::sleep(Duration::from_nanos(nanos));
    }

    /// Consumes `queue` until `stop` is set (or, with
    /// [`ConsumerOptions::exit_when_idle`], until the queue drains).
    ///
    /// Applied and permanently failing messages are acked; a message whose
    /// writes kept conflicting is nacked for redelivery.
    pub fn run_consumer<M: Inbound>(
        &self,
        queue: &dyn MessageQueue<M>,
        stop: &AtomicBool,
        options: ConsumerOptions,
    ) -> ConsumerStats {
        let mut stats = ConsumerStats::default();
        while !stop.load(Ordering::Acquire) {
            let Some(delivery) = queue.dequeue_timeout(options.poll_interval) else {
                if options.exit_when_idle && queue.is_idle() {
                    break;
                }
                continue;
            };
            match delivery.message.apply(self) {
                Ok(outcome) => {
                    stats.processed += 1;
                    stats.ks_evaluations += outcome.results.len() as u64;
                    stats.alerts += outcome.alerts;
                    stats.cas_conflicts += outcome.cas_conflicts;
                    ack(queue, delivery.tag);
                }
                Err(e) if e.is_transient() => {
                    log::warn!("requeueing message (attempt {}): {e}", delivery.attempt);
                    stats.nacked += 1;
                    if let Err(e) = queue.nack(delivery.tag) {
                        log::warn!("{e}");
                    }
                }
                Err(e) => {
                    log::error!("rejecting message: {e}");
                    stats.rejected += 1;
                    ack(queue, delivery.tag);
                }
            }
        }
        stats
    }
}

fn ack<M>(queue: &dyn MessageQueue<M>, tag: u64) {
    if let Err(e) = queue.ack(tag) {
        log::warn!("{e}");
    }
}
