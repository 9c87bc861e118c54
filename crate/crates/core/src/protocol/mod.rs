//! Client to backend contract: the report envelope, monitored-group
//! definitions and routing, and the queue and versioned-store abstractions
//! the backend runs on.

mod queue;
mod report;
mod store;

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sketch::{DigestConfig, SketchError};

pub use queue::{Delivery, DeliveryTag, MemoryQueue, MessageQueue, QueueError};
pub use report::{decode_report, encode_report, ReportMessage, REPORT_FORMAT_VERSION, REPORT_MAGIC};
pub use store::{MemoryStore, StoreError, Version, Versioned, VersionedStore};

/// Attribute name to value, e.g. `"location" -> "NY"`. Ordered so encoding
/// is canonical.
pub type Attributes = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("report payload truncated at byte {0}")]
    Truncated(usize),
    #[error("bad report magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported report format version {0}")]
    UnsupportedVersion(u8),
    #[error("field {0} is not valid UTF-8")]
    InvalidUtf8(&'static str),
    #[error("{0} trailing bytes after report")]
    TrailingBytes(usize),
    #[error("attribute keys are not strictly ascending")]
    NonCanonicalAttributes,
    #[error("embedded digest: {0}")]
    Digest(#[from] SketchError),
    #[error("sample_count {declared} does not match digest weight {digest_weight}")]
    SampleCountMismatch { declared: u64, digest_weight: f64 },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error("invalid group spec {group_id}: {reason}")]
    InvalidGroup { group_id: String, reason: String },
}

/// A monitored population and how it is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_id: String,
    /// Required attribute values; attributes not listed are wildcards.
    #[serde(default)]
    pub predicate: Attributes,
    /// Samples that must accumulate before the group is evaluated.
    pub aggregation_size: u64,
    /// Alert when the statistic reaches this value.
    pub ks_alert_threshold: f64,
    pub reference_key: String,
    #[serde(default)]
    pub digest_config: DigestConfig,
}

impl GroupSpec {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let invalid = |reason: &str| ProtocolError::InvalidGroup {
            group_id: self.group_id.clone(),
            reason: reason.to_string(),
        };
        if self.aggregation_size < 1 {
            return Err(invalid("aggregation_size must be at least 1"));
        }
        if !(self.ks_alert_threshold > 0.0 && self.ks_alert_threshold <= 1.0) {
            return Err(invalid("ks_alert_threshold must be in (0, 1]"));
        }
        self.digest_config.validate().map_err(|e| invalid(&e.to_string()))
    }

    pub fn matches(&self, attributes: &Attributes) -> bool {
        self.predicate
            .iter()
            .all(|(key, wanted)| attributes.get(key) == Some(wanted))
    }
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Ids of every group whose predicate is satisfied by `attributes`, sorted.
pub fn match_groups(attributes: &Attributes, groups: &[GroupSpec]) -> Vec<String> {
    let mut ids: Vec<String> = groups
        .iter()
        .filter(|g| g.matches(attributes))
        .map(|g| g.group_id.clone())
        .collect();
    ids.sort();
    ids
}

/// The four populations of the routing walkthrough: everyone, males,
/// females, and New York residents.
pub fn example_groups(aggregation_size: u64, threshold: f64, reference_key: &str) -> Vec<GroupSpec> {
    let group = |id: &str, predicate: &[(&str, &str)]| GroupSpec {
        group_id: id.to_string(),
        predicate: predicate.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        aggregation_size,
        ks_alert_threshold: threshold,
        reference_key: reference_key.to_string(),
        digest_config: DigestConfig::default(),
    };
    vec![
        group("group1", &[]),
        group("group2", &[("gender", "male")]),
        group("group3", &[("gender", "female")]),
        group("group4", &[("location", "NY")]),
    ]
}

pub fn attributes<const N: usize>(pairs: [(&str, &str); N]) -> Attributes {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_example() {
        let groups = example_groups(100, 0.05, "ref");
        let attrs = attributes([("gender", "male"), ("age", "65"), ("location", "NY")]);
        assert_eq!(match_groups(&attrs, &groups), ["group1", "group2", "group4"]);
    }

    #[test]
    fn empty_groups_and_mismatches() {
        let attrs = attributes([("location", "NY")]);
        assert!(match_groups(&attrs, &[]).is_empty());

        let mut la = example_groups(1, 0.05, "ref").remove(3);
        la.predicate.insert("location".into(), "LA".into());
        assert!(match_groups(&attrs, &[la]).is_empty());

        // A missing attribute fails the predicate entry.
        let groups = example_groups(1, 0.05, "ref");
        assert_eq!(match_groups(&Attributes::new(), &groups), ["group1"]);
    }

    #[test]
    fn result_order_ignores_input_order() {
        let mut groups = example_groups(1, 0.05, "ref");
        groups.reverse();
        let attrs = attributes([("gender", "female"), ("location", "NY")]);
        assert_eq!(match_groups(&attrs, &groups), ["group1", "group3", "group4"]);
    }

    #[test]
    fn group_validation() {
        let mut g = example_groups(1, 0.05, "ref").remove(0);
        assert!(g.validate().is_ok());
        g.aggregation_size = 0;
        assert!(g.validate().is_err());
        g.aggregation_size = 10;
        g.ks_alert_threshold = 0.0;
        assert!(g.validate().is_err());
        g.ks_alert_threshold = 1.0;
        assert!(g.validate().is_ok());
    }
}
