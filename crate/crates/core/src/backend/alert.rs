use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use crate::ks::KsResult;
use crate::protocol::GroupSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct AlertEvent {
    pub group_id: String,
    pub ks: KsResult,
    pub threshold: f64,
    pub fired_at_ms: i64,
    pub window_samples: u64,
}

impl AlertEvent {
    pub fn log_line(&self) -> String {
        format!(
            "{} ALERT group={} statistic={:.6} threshold={} window_samples={} n_ref={}",
            self.fired_at_ms, self.group_id, self.ks.statistic, self.threshold, self.window_samples, self.ks.n_ref
        )
    }
}

/// Every completed evaluation, alerting or not.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub group_id: String,
    pub fired_at_ms: i64,
    pub ks: KsResult,
    pub window_samples: u64,
    pub alerted: bool,
}

pub trait AlertSink: Send + Sync {
    fn alert(&self, event: &AlertEvent);
}

pub trait ResultRecorder: Send + Sync {
    fn record(&self, evaluation: &Evaluation);
}

/// Keeps alerts in memory.
#[derive(Default)]
pub struct CollectingSink {
    events: Mutex<Vec<AlertEvent>>,
}

impl CollectingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<AlertEvent> {
        self.events.lock().expect("sink lock poisoned").clone()
    }
}

impl AlertSink for CollectingSink {
    fn alert(&self, event: &AlertEvent) {
        self.events.lock().expect("sink lock poisoned").push(event.clone());
    }
}

/// Forwards alerts to a closure.
pub struct CallbackSink<F>(pub F);

impl<F: Fn(&AlertEvent) + Send + Sync> AlertSink for CallbackSink<F> {
    fn alert(&self, event: &AlertEvent) {
        (self.0)(event)
    }
}

/// Appends one line per alert to a file such as `alerts.log`.
pub struct AlertLog {
    file: Mutex<File>,
}

impl AlertLog {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }
}

impl AlertSink for AlertLog {
    fn alert(&self, event: &AlertEvent) {
        let mut file = self.file.lock().expect("alert log lock poisoned");
        if let Err(e) = writeln!(file, "{}", event.log_line()) {
            log::error!("writing alert log: {e}");
        }
    }
}

/// Keeps evaluations in memory.
#[derive(Default)]
pub struct MemoryResults {
    evaluations: Mutex<Vec<Evaluation>>,
}

impl MemoryResults {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn evaluations(&self) -> Vec<Evaluation> {
        self.evaluations.lock().expect("results lock poisoned").clone()
    }
}

impl ResultRecorder for MemoryResults {
    fn record(&self, evaluation: &Evaluation) {
        self.evaluations
            .lock()
            .expect("results lock poisoned")
            .push(evaluation.clone());
    }
}

#[derive(Serialize)]
struct ResultRow<'a> {
    group_id: &'a str,
    fired_at_ms: i64,
    statistic: f64,
    window_samples: u64,
    n_ref: u64,
    alerted: u8,
}

/// Append-only `ks_results.csv`.
pub struct CsvResultsLog {
    writer: Mutex<csv::Writer<File>>,
}

impl CsvResultsLog {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            writer: Mutex::new(writer),
        })
    }
}

impl ResultRecorder for CsvResultsLog {
    fn record(&self, evaluation: &Evaluation) {
        let row = ResultRow {
            group_id: &evaluation.group_id,
            fired_at_ms: evaluation.fired_at_ms,
            statistic: evaluation.ks.statistic,
            window_samples: evaluation.window_samples,
            n_ref: evaluation.ks.n_ref,
            alerted: u8::from(evaluation.alerted),
        };
        let mut writer = self.writer.lock().expect("results log lock poisoned");
        if let Err(e) = writer.serialize(row).and_then(|()| writer.flush().map_err(Into::into)) {
            log::error!("writing results log: {e}");
        }
    }
}

/// Records `result` and alerts iff its statistic reaches the group's
/// threshold.
pub fn evaluate_and_alert(
    result: &KsResult,
    spec: &GroupSpec,
    sink: Option<&dyn AlertSink>,
    recorders: &[&dyn ResultRecorder],
    fired_at_ms: i64,
) -> Option<AlertEvent> {
    let alerted = result.statistic >= spec.ks_alert_threshold;
    let evaluation = Evaluation {
        group_id: spec.group_id.clone(),
        fired_at_ms,
        ks: result.clone(),
        window_samples: result.n_new,
        alerted,
    };
    for recorder in recorders {
        recorder.record(&evaluation);
    }
    if !alerted {
        return None;
    }
    let event = AlertEvent {
        group_id: spec.group_id.clone(),
        ks: result.clone(),
        threshold: spec.ks_alert_threshold,
        fired_at_ms,
        window_samples: result.n_new,
    };
    if let Some(sink) = sink {
        sink.alert(&event);
    }
    Some(event)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::example_groups;

    fn result(statistic: f64) -> KsResult {
        KsResult {
            statistic,
            n_new: 40_000,
            n_ref: 100_000,
            grid_size: 10,
            group_id: Some("group1".into()),
        }
    }

    #[test]
    fn threshold_semantics() {
        let spec = example_groups(1, 0.05, "ref").remove(0);
        let sink = CollectingSink::new();
        let results = MemoryResults::new();
        let recorders: [&dyn ResultRecorder; 1] = [&results];
        assert!(evaluate_and_alert(&result(0.20), &spec, Some(&sink), &recorders, 1).is_some());
        assert!(evaluate_and_alert(&result(0.001), &spec, Some(&sink), &recorders, 2).is_none());
        assert!(evaluate_and_alert(&result(0.05), &spec, Some(&sink), &recorders, 3).is_some());
        assert_eq!(sink.events().len(), 2);
        let alerted: Vec<bool> = results.evaluations().iter().map(|e| e.alerted).collect();
        assert_eq!(alerted, [true, false, true]);
    }

    #[test]
    fn log_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = example_groups(1, 0.05, "ref").remove(0);
        let csv_path = dir.path().join("ks_results.csv");
        let alert_path = dir.path().join("alerts.log");
        for _ in 0..2 {
            let log = CsvResultsLog::open(&csv_path).unwrap();
            let alerts = AlertLog::open(&alert_path).unwrap();
            let recorders: [&dyn ResultRecorder; 1] = [&log];
            evaluate_and_alert(&result(0.25), &spec, Some(&alerts), &recorders, 7);
            evaluate_and_alert(&result(0.01), &spec, Some(&alerts), &recorders, 8);
        }
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(
            csv,
            "group_id,fired_at_ms,statistic,window_samples,n_ref,alerted\n\
             group1,7,0.25,40000,100000,1\n\
             group1,8,0.01,40000,100000,0\n\
             group1,7,0.25,40000,100000,1\n\
             group1,8,0.01,40000,100000,0\n"
        );
        let alerts = std::fs::read_to_string(&alert_path).unwrap();
        assert_eq!(alerts.lines().count(), 2);
        assert_eq!(
            alerts.lines().next().unwrap(),
            "7 ALERT group=group1 statistic=0.250000 threshold=0.05 window_samples=40000 n_ref=100000"
        );
    }

    #[test]
    fn callback_sink() {
        let count = std::sync::atomic::AtomicUsize::new(0);
        let sink = CallbackSink(|_: &AlertEvent| {
            count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        });
        let spec = example_groups(1, 0.05, "ref").remove(0);
        evaluate_and_alert(&result(0.5), &spec, Some(&sink), &[], 0);
        assert_eq!(count.into_inner(), 1);
    }
}
