use driftwatch::harness::stats::{linear_fit, spearman};
use driftwatch::harness::{
    default_scenarios, run_accuracy_experiment, run_conservation_audit, run_runtime_benchmark, summarize,
    AccuracyConfig, AuditConfig, LinkModel, RuntimeConfig, RuntimeMode, ShiftKind,
};

#[test]
fn backend_runtime_scales_linearly_in_aggregation_size() {
    let sizes = vec![125_000, 250_000, 500_000, 1_000_000];
    let config = RuntimeConfig {
        sizes: sizes.clone(),
        repetitions: 3,
        link: LinkModel::none(),
        ..RuntimeConfig::default()
    };
    let report = run_runtime_benchmark(&config).unwrap();
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    for mode in [RuntimeMode::Merge, RuntimeMode::Stream] {
        let ys: Vec<f64> = sizes
            .iter()
            .map(|&s| report.backend_row(mode, s).unwrap().mean_ms)
            .collect();
        let (slope, _, r2) = linear_fit(&xs, &ys);
        assert!(slope > 0.0, "{mode}: slope {slope}");
        assert!(r2 > 0.95, "{mode}: r2 {r2} over {ys:?}");
    }
}

#[test]
fn detection_grows_with_immediate_shift_fraction() {
    let config = AccuracyConfig {
        scenarios: default_scenarios(ShiftKind::Immediate),
        trials: 5,
        n_per_side: 50_000,
        ..AccuracyConfig::default()
    };
    let summary = summarize(&run_accuracy_experiment(&config).unwrap());
    let fractions: Vec<f64> = summary.iter().map(|s| s.scenario.affected_fraction).collect();
    let means: Vec<f64> = summary.iter().map(|s| s.mean_digest_ks).collect();
    let rho = spearman(&fractions, &means);
    assert!(rho > 0.9, "spearman {rho} over {means:?}");
}

#[test]
fn detection_grows_with_graded_shift_degree() {
    let config = AccuracyConfig {
        scenarios: default_scenarios(ShiftKind::Graded),
        trials: 5,
        n_per_side: 50_000,
        ..AccuracyConfig::default()
    };
    let summary = summarize(&run_accuracy_experiment(&config).unwrap());
    let degrees: Vec<f64> = summary.iter().map(|s| s.scenario.degree).collect();
    let means: Vec<f64> = summary.iter().map(|s| s.mean_digest_ks).collect();
    assert!(spearman(&degrees, &means) > 0.9, "{means:?}");
}

#[test]
fn client_count_barely_moves_the_estimate() {
    let run = |n_clients| {
        let config = AccuracyConfig {
            trials: 5,
            n_clients,
            d: 2_000,
            ..AccuracyConfig::default()
        };
        run_accuracy_experiment(&config).unwrap()
    };
    let (few, many) = (run(1), run(50));
    for (a, b) in few.iter().zip(&many) {
        assert_eq!(a.optimal_ks, b.optimal_ks);
        assert!(
            (a.digest_ks - b.digest_ks).abs() < 0.005,
            "{} vs {}",
            a.digest_ks,
            b.digest_ks
        );
    }
}

#[test]
fn concurrent_consumers_conserve_samples() {
    for seed in [1, 2, 3] {
        let report = run_conservation_audit(&AuditConfig {
            consumers: 8,
            reports: 200,
            samples_per_report: 1_000,
            aggregation_size: 50_000,
            seed,
        })
        .unwrap();
        assert!(report.conserved(), "seed {seed}: {report:?}");
        assert_eq!(report.evaluations, 4);
        assert_eq!(report.residual, 0.0);
        assert_eq!(report.stats.processed, 200);
    }
}

#[test]
fn audit_keeps_partial_window_as_residual() {
    let report = run_conservation_audit(&AuditConfig {
        consumers: 4,
        reports: 130,
        samples_per_report: 1_000,
        aggregation_size: 50_000,
        seed: 9,
    })
    .unwrap();
    assert!(report.conserved());
    assert_eq!(report.evaluations, 2);
    assert_eq!(report.residual, 30_000.0);
}
