//! Edge-device agent: summarizes its sample stream in a local digest and
//! emits a report every `d` samples.

use thiserror::Error;

use crate::protocol::{now_ms, Attributes, ProtocolError, ReportMessage};
use crate::sketch::{DigestConfig, SketchError, TDigest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("observed value {0} is not finite")]
    NonFinite(f64),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Samples per report.
    pub d: u64,
    pub digest_config: DigestConfig,
    pub client_id: String,
    pub model_id: String,
    pub attributes: Attributes,
    /// Samples buffered before each digest update; 1 updates per sample.
    pub batch_size: usize,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>, d: u64) -> Self {
        Self {
            d,
            digest_config: DigestConfig::default(),
            client_id: client_id.into(),
            model_id: "model".to_string(),
            attributes: Attributes::new(),
            batch_size: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.d < 1 {
            return Err(ClientError::InvalidConfig("d must be at least 1".into()));
        }
        if self.batch_size < 1 || self.batch_size as u64 > self.d {
            return Err(ClientError::InvalidConfig(format!(
                "batch_size {} must be in [1, d = {}]",
                self.batch_size, self.d
            )));
        }
        self.digest_config.validate()?;
        Ok(())
    }
}

pub struct ClientAgent {
    config: ClientConfig,
    digest: TDigest,
    pending: Vec<f64>,
    samples_since_flush: u64,
    sequence_no: u64,
    clock: fn() -> i64,
}

impl ClientAgent {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        Ok(Self {
            digest: TDigest::new(config.digest_config)?,
            pending: Vec::with_capacity(config.batch_size),
            config,
            samples_since_flush: 0,
            sequence_no: 0,
            clock: now_ms,
        })
    }

    /// Replaces the wall clock used for `created_at_ms`.
    pub fn with_clock(mut self, clock: fn() -> i64) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn digest(&self) -> &TDigest {
        &self.digest
    }

    pub fn pending(&self) -> &[f64] {
        &self.pending
    }

    pub fn samples_since_flush(&self) -> u64 {
        self.samples_since_flush
    }

    pub fn sequence_no(&self) -> u64 {
        self.sequence_no
    }

    /// Records one sample; returns a report when this sample completes a
    /// window of `d`.
    pub fn observe(&mut self, value: f64) -> Result<Option<ReportMessage>, ClientError> {
        if !value.is_finite() {
            return Err(ClientError::NonFinite(value));
        }
        self.pending.push(value);
        self.samples_since_flush += 1;
        if self.pending.len() >= self.config.batch_size {
            self.drain()?;
        }
        if self.samples_since_flush >= self.config.d {
            return self.flush();
        }
        Ok(None)
    }

    /// Emits whatever has been observed since the last report, if anything,
    /// and starts a fresh window.
    pub fn flush(&mut self) -> Result<Option<ReportMessage>, ClientError> {
        self.drain()?;
        if self.digest.is_empty() {
            self.samples_since_flush = 0;
            return Ok(None);
        }
        let report = ReportMessage::new(
            &self.config.client_id,
            self.sequence_no,
            &self.config.model_id,
            self.config.attributes.clone(),
            &self.digest,
            (self.clock)(),
        )?;
        self.sequence_no += 1;
        self.samples_since_flush = 0;
        self.digest.reset();
        Ok(Some(report))
    }

    fn drain(&mut self) -> Result<(), ClientError> {
        if !self.pending.is_empty() {
            self.digest.update_batch(&self.pending)?;
            self.pending.clear();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(d: u64, batch_size: usize) -> ClientAgent {
        let mut config = ClientConfig::new("c1", d);
        config.batch_size = batch_size;
        ClientAgent::new(config).unwrap().with_clock(|| 42)
    }

    #[test]
    fn reports_at_threshold() {
        let mut a = agent(3, 1);
        assert!(a.observe(1.0).unwrap().is_none());
        assert!(a.observe(2.0).unwrap().is_none());
        let r = a.observe(3.0).unwrap().unwrap();
        assert_eq!(r.sample_count, 3);
        assert_eq!(r.created_at_ms, 42);
        assert_eq!(r.report_id, "c1-0000000000");
    }

    #[test]
    fn one_report_per_window_of_d() {
        let mut a = agent(20_000, 1);
        let mut reports = Vec::new();
        for i in 0..60_000 {
            if let Some(r) = a.observe(f64::from(i % 977)).unwrap() {
                reports.push((i, r));
            }
        }
        let at: Vec<i32> = reports.iter().map(|(i, _)| *i).collect();
        assert_eq!(at, [19_999, 39_999, 59_999]);
        assert!(reports.iter().all(|(_, r)| r.sample_count == 20_000));
    }

    #[test]
    fn flush_resets_and_advances_sequence() {
        let mut a = agent(100, 1);
        assert!(a.flush().unwrap().is_none());
        for i in 0..5 {
            a.observe(f64::from(i)).unwrap();
        }
        let r = a.flush().unwrap().unwrap();
        assert_eq!(r.sample_count, 5);
        assert!(a.digest().is_empty());
        assert_eq!(a.samples_since_flush(), 0);
        assert!(a.flush().unwrap().is_none());
        a.observe(1.0).unwrap();
        assert_eq!(a.flush().unwrap().unwrap().report_id, "c1-0000000001");
    }

    #[test]
    fn pending_plus_digest_tracks_observations() {
        let mut a = agent(100, 8);
        for i in 0..13 {
            a.observe(f64::from(i)).unwrap();
            let held = a.digest().total_weight() as u64 + a.pending().len() as u64;
            assert_eq!(held, a.samples_since_flush());
        }
        assert_eq!(a.pending().len(), 5);
    }

    #[test]
    fn rejects_bad_input() {
        let mut a = agent(10, 1);
        assert_eq!(
            a.observe(f64::NAN).unwrap_err().to_string(),
            "observed value NaN is not finite"
        );
        assert_eq!(a.samples_since_flush(), 0);
        let mut config = ClientConfig::new("c", 4);
        config.batch_size = 5;
        assert!(ClientAgent::new(config).is_err());
        assert!(ClientAgent::new(ClientConfig::new("c", 0)).is_err());
    }
}
