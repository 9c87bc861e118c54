//! Experiment drivers: synthetic and CSV data, shift injection, accuracy
//! trials through the full client, queue and backend path, runtime
//! benchmarks of digest merging against raw streaming, fleet simulation and
//! a quick self-check.

mod accuracy;
mod data;
mod fleet;
mod runtime;
mod selftest;
pub mod stats;

use thiserror::Error;

use crate::backend::BackendError;
use crate::client::ClientError;
use crate::ks::KsError;
use crate::sketch::SketchError;

pub use accuracy::{
    default_scenarios, run_accuracy_experiment, summarize, write_accuracy_csv, AccuracyConfig, DataSource, PhaseTimes,
    ScenarioSpec, ScenarioSummary, TrialRecord, IMMEDIATE_DEGREE,
};
pub use data::{
    apply_shift, generate_population, load_csv_amounts, Population, PopulationModel, ShiftKind, ShiftScenario,
};
pub use fleet::{run_conservation_audit, simulate, AuditConfig, AuditReport, FleetConfig, FleetSummary};
pub use runtime::{
    run_runtime_benchmark, write_client_csv, write_runtime_csv, ClientRuntimeRow, LinkModel, RuntimeConfig,
    RuntimeMode, RuntimeReport, RuntimeRow,
};
pub use selftest::{run_selftest, SelfTestCase};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("need {needed} samples, only {available} available")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("conservation violated: {0}")]
    Conservation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ks(#[from] KsError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

/// Derives an independent seed for a sub-task.
pub(crate) fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    // SplitMix64 finalizer over the folded parts.
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
