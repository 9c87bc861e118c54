//! Distribution-shift monitoring for fleets of edge devices.
//!
//! Devices summarize what they observe in mergeable t-digests
//! ([`sketch`]), ship them as [`protocol::ReportMessage`]s through a queue
//! ([`client`]), and a backend merges them per monitored population and
//! compares the aggregate against a reference distribution with a
//! Kolmogorov-Smirnov statistic ([`backend`], [`ks`]). The [`harness`]
//! module drives accuracy and runtime experiments over simulated fleets.

pub mod backend;
pub mod client;
pub mod harness;
pub mod ks;
pub mod protocol;
pub mod sketch;

pub use backend::{AlertEvent, Backend, BackendError, ReferenceMode, SampleBatch};
pub use client::{ClientAgent, ClientConfig, ClientError};
pub use ks::{KsError, KsResult, ReferenceDistribution};
pub use protocol::{Attributes, GroupSpec, ProtocolError, ReportMessage};
pub use sketch::{CdfCurve, Centroid, DigestConfig, SketchError, TDigest};
