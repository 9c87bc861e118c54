use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use driftwatch::backend::ReferenceMode;
use driftwatch::harness::{
    default_scenarios, load_csv_amounts, run_accuracy_experiment, run_runtime_benchmark, run_selftest, simulate,
    summarize, write_accuracy_csv, write_client_csv, write_runtime_csv, AccuracyConfig, DataSource, FleetConfig,
    HarnessError, LinkModel, PopulationModel, RuntimeConfig, RuntimeMode, ScenarioSpec, ShiftKind, ShiftScenario,
    IMMEDIATE_DEGREE,
};
use driftwatch::protocol::{example_groups, GroupSpec};
use driftwatch::DigestConfig;

#[derive(Parser)]
#[command(name = "driftwatch", version, arg_required_else_help = true)]
/// Distribution-shift monitoring with mergeable t-digests and a
/// distributed Kolmogorov-Smirnov test.
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the digest KS estimate with the exact statistic over repeated trials.
    Accuracy(AccuracyArgs),
    /// Time digest merging against raw sample streaming.
    Bench(BenchArgs),
    /// Run a concurrent client fleet against the backend, printing alerts as they fire.
    Simulate(SimulateArgs),
    /// Run the quick oracle-equivalence checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Synth,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Graded,
    Immediate,
}

impl From<Kind> for ShiftKind {
    fn from(kind: Kind) -> Self {
        match kind {
            Kind::Graded => ShiftKind::Graded,
            Kind::Immediate => ShiftKind::Immediate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Exact,
    Digest,
}

#[derive(Args)]
struct ShiftArgs {
    /// Shift to inject into the new data; omitted with no degree or fraction means no shift.
    #[arg(long, value_enum)]
    shift_kind: Option<Kind>,
    /// Multiplicative shift degree (at least 1).
    #[arg(long)]
    degree: Option<f64>,
    /// Share of transactions (graded) or users (immediate) affected.
    #[arg(long)]
    affected_fraction: Option<f64>,
}

impl ShiftArgs {
    fn requested(&self) -> bool {
        self.shift_kind.is_some() || self.degree.is_some() || self.affected_fraction.is_some()
    }

    fn kind(&self) -> ShiftKind {
        self.shift_kind.map_or(ShiftKind::Graded, ShiftKind::from)
    }

    /// One scenario, filling unset values with per-kind defaults.
    fn single(&self) -> ScenarioSpec {
        let kind = self.kind();
        let (degree, fraction) = match kind {
            ShiftKind::Graded => (1.5, 0.3),
            ShiftKind::Immediate => (IMMEDIATE_DEGREE, 0.1),
        };
        ScenarioSpec {
            kind,
            degree: self.degree.unwrap_or(degree),
            affected_fraction: self.affected_fraction.unwrap_or(fraction),
        }
    }
}

#[derive(Args)]
struct AccuracyArgs {
    #[arg(long, value_enum, default_value = "synth")]
    source: Source,
    /// Transaction CSV with a header row (required with --source csv).
    #[arg(long)]
    csv_path: Option<PathBuf>,
    /// Amount column of the CSV.
    #[arg(long, default_value = "amount")]
    column: String,
    #[arg(long, default_value_t = 100_000)]
    n_per_side: usize,
    #[arg(long, default_value_t = 15)]
    trials: usize,
    /// With a kind but no degree or fraction, runs that kind's full scenario grid.
    #[command(flatten)]
    shift: ShiftArgs,
    #[arg(long, default_value_t = 10)]
    n_clients: usize,
    /// Client report threshold in samples.
    #[arg(long, default_value_t = 20_000)]
    d: u64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 25)]
    k_limit: u32,
    #[arg(long, default_value_t = 0.03)]
    alert_threshold: f64,
    #[arg(long, value_enum, default_value = "exact")]
    reference: Reference,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory for accuracy.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Merge,
    Stream,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "both")]
    mode: Mode,
    /// Comma-separated aggregation sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [125_000u64, 250_000, 500_000, 1_000_000])]
    sizes: Vec<u64>,
    /// Samples per merge-mode client report.
    #[arg(long, default_value_t = 20_000)]
    d: u64,
    /// Samples per stream-mode batch.
    #[arg(long, default_value_t = 1_000)]
    stream_batch: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    no_warmup: bool,
    /// Simulated uplink latency per message, in milliseconds.
    #[arg(long, default_value_t = 10.0)]
    latency_ms: f64,
    /// Simulated uplink bandwidth in bytes per second.
    #[arg(long, default_value_t = 1.25e6)]
    bandwidth: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory for runtime.csv and client_runtime.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    n_clients: usize,
    #[arg(long, default_value_t = 1_000)]
    d: u64,
    /// JSON array of group specs; groups must use reference key "reference".
    #[arg(long)]
    groups_file: Option<PathBuf>,
    /// Overrides every group's alert threshold.
    #[arg(long)]
    alert_threshold: Option<f64>,
    /// Aggregation size of the built-in groups.
    #[arg(long, default_value_t = 50_000)]
    aggregation_size: u64,
    #[arg(long, default_value_t = 2_000)]
    samples_per_client: usize,
    #[arg(long, default_value_t = 4)]
    consumers: usize,
    /// Shift applied to the second half of every client's stream.
    #[command(flatten)]
    shift: ShiftArgs,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory for alerts.log and ks_results.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidParameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn accuracy(args: AccuracyArgs) -> Result<(), Failure> {
    let source = match args.source {
        Source::Synth => DataSource::Synthetic(PopulationModel::default()),
        Source::Csv => {
            let path = args
                .csv_path
                .as_ref()
                .ok_or_else(|| Failure::Usage("--source csv requires --csv-path".into()))?;
            let (values, skipped) = load_csv_amounts(path, &args.column)?;
            if skipped > 0 {
                eprintln!("skipped {skipped} rows without a usable {:?} value", args.column);
            }
            DataSource::Observed(values)
        }
    };
    let scenarios = match (&args.shift, args.shift.degree, args.shift.affected_fraction) {
        (shift, None, None) if shift.shift_kind.is_some() => default_scenarios(shift.kind()),
        (shift, _, _) if shift.requested() => vec![shift.single()],
        _ => vec![ScenarioSpec {
            kind: ShiftKind::Graded,
            degree: 1.0,
            affected_fraction: 0.3,
        }],
    };
    let digest_config = DigestConfig::new(args.delta, args.k_limit).map_err(|e| Failure::Usage(e.to_string()))?;
    let config = AccuracyConfig {
        source,
        scenarios,
        trials: args.trials,
        n_per_side: args.n_per_side,
        digest_config,
        n_clients: args.n_clients,
        d: args.d,
        alert_threshold: args.alert_threshold,
        reference_mode: match args.reference {
            Reference::Exact => ReferenceMode::Exact,
            Reference::Digest => ReferenceMode::Digest,
        },
        seed: args.seed,
        ..AccuracyConfig::default()
    };
    let records = run_accuracy_experiment(&config)?;
    create_dir(&args.out)?;
    let path = args.out.join("accuracy.csv");
    write_accuracy_csv(&path, &records)?;

    println!(
        "{:<10} {:>7} {:>9} {:>6} {:>11} {:>11} {:>11} {:>11} {:>7}",
        "kind", "degree", "fraction", "trials", "med |err|", "max |err|", "exact ks", "digest ks", "alerts"
    );
    for s in summarize(&records) {
        println!(
            "{:<10} {:>7} {:>9} {:>6} {:>11.5} {:>11.5} {:>11.5} {:>11.5} {:>7}",
            s.scenario.kind.to_string(),
            s.scenario.degree,
            s.scenario.affected_fraction,
            s.trials,
            s.median_abs_error,
            s.max_abs_error,
            s.mean_optimal_ks,
            s.mean_digest_ks,
            s.alerts
        );
    }
    println!("wrote {} rows to {}", records.len(), path.display());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    if !(args.latency_ms >= 0.0 && args.latency_ms.is_finite() && args.bandwidth > 0.0) {
        return Err(Failure::Usage(
            "latency must be non-negative and bandwidth positive".into(),
        ));
    }
    let config = RuntimeConfig {
        modes: match args.mode {
            Mode::Merge => vec![RuntimeMode::Merge],
            Mode::Stream => vec![RuntimeMode::Stream],
            Mode::Both => vec![RuntimeMode::Merge, RuntimeMode::Stream],
        },
        sizes: args.sizes,
        d: args.d,
        stream_batch: args.stream_batch,
        repetitions: args.reps,
        warmup: !args.no_warmup,
        link: LinkModel {
            latency: Duration::from_secs_f64(args.latency_ms / 1e3),
            bandwidth_bytes_per_sec: args.bandwidth,
        },
        seed: args.seed,
        ..RuntimeConfig::default()
    };
    let report = run_runtime_benchmark(&config)?;
    create_dir(&args.out)?;
    write_runtime_csv(args.out.join("runtime.csv"), &report.backend)?;
    write_client_csv(args.out.join("client_runtime.csv"), &report.client)?;

    println!("{:<7} {:>12} {:>12} {:>12}", "mode", "size", "backend ms", "stddev ms");
    for row in &report.backend {
        println!(
            "{:<7} {:>12} {:>12.2} {:>12.2}",
            row.mode.to_string(),
            row.aggregation_size,
            row.mean_ms,
            row.stddev_ms
        );
    }
    println!(
        "{:<7} {:>12} {:>9} {:>12} {:>12} {:>12}",
        "mode", "size", "messages", "client cpu", "network ms", "us/sample"
    );
    for row in &report.client {
        println!(
            "{:<7} {:>12} {:>9} {:>12.2} {:>12.2} {:>12.4}",
            row.mode.to_string(),
            row.aggregation_size,
            row.messages,
            row.cpu_ms,
            row.network_ms,
            row.per_sample_us
        );
    }
    Ok(())
}

fn load_groups(path: &Path) -> Result<Vec<GroupSpec>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn simulate_fleet(args: SimulateArgs) -> Result<(), Failure> {
    let mut groups = match &args.groups_file {
        Some(path) => load_groups(path)?,
        None => example_groups(args.aggregation_size, 0.03, "reference"),
    };
    if let Some(threshold) = args.alert_threshold {
        for g in &mut groups {
            g.ks_alert_threshold = threshold;
        }
    }
    let shift = args.shift.requested().then(|| {
        let s = args.shift.single();
        ShiftScenario {
            kind: s.kind,
            degree: s.degree,
            affected_fraction: s.affected_fraction,
            seed: args.seed,
        }
    });
    create_dir(&args.out)?;
    let config = FleetConfig {
        n_clients: args.n_clients,
        d: args.d,
        samples_per_client: args.samples_per_client,
        groups,
        consumers: args.consumers,
        shift,
        seed: args.seed,
        out_dir: Some(args.out.clone()),
        ..FleetConfig::default()
    };
    let summary = simulate(&config, |event| println!("{}", event.log_line()))?;

    let alerts = summary.evaluations.iter().filter(|e| e.alerted).count();
    println!(
        "clients {} samples {} reports {} evaluations {} alerts {} rejected {}",
        args.n_clients,
        summary.samples_observed,
        summary.reports_sent,
        summary.evaluations.len(),
        alerts,
        summary.stats.rejected
    );
    for (group, residual) in &summary.residual {
        println!("group {group} pending_samples {residual}");
    }
    Ok(())
}

fn selftest(args: SelftestArgs) -> Result<(), Failure> {
    let cases = run_selftest(args.seed);
    for c in &cases {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Data(format!("{failed} of {} checks failed", cases.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let outcome = match cli.command {
        Command::Accuracy(args) => accuracy(args),
        Command::Bench(args) => bench(args),
        Command::Simulate(args) => simulate_fleet(args),
        Command::Selftest(args) => selftest(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(Failure::Data(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
