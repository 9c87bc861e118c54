use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{apply_shift, generate_population, PopulationModel, ShiftKind, ShiftScenario};
use super::sub_seed;
use crate::ks::{ks_digest, ks_digest_vs_reference, ks_exact, ReferenceDistribution};
use crate::protocol::{attributes, decode_report, encode_report, example_groups, match_groups, ReportMessage};
use crate::sketch::{DigestConfig, TDigest};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestCase {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn case(name: &'static str, passed: bool, detail: String) -> SelfTestCase {
    SelfTestCase { name, passed, detail }
}

fn digest_of(values: &[f64]) -> TDigest {
    let mut d = TDigest::default();
    d.update_batch(values).expect("finite samples");
    d
}

/// Quick oracle-equivalence checks of the sketch, KS and protocol layers.
pub fn run_selftest(seed: u64) -> Vec<SelfTestCase> {
    let model = PopulationModel::default();
    let population = generate_population(&model, seed).expect("default model is valid");
    let reference = population.samples();
    let fresh = population.resample(sub_seed(seed, &[1]));
    let mut cases = Vec::new();

    for (name, degree) in [
        ("ks estimator vs exact, no shift", 1.0),
        ("ks estimator vs exact, graded shift", 1.5),
    ] {
        let scenario = ShiftScenario {
            kind: ShiftKind::Graded,
            degree,
            affected_fraction: 0.3,
            seed: sub_seed(seed, &[2]),
        };
        let new = apply_shift(&fresh, &scenario).expect("valid scenario").samples();
        let exact = ks_exact(&reference, &new).expect("non-empty");
        let reference = ReferenceDistribution::new(reference.clone(), DigestConfig::default()).expect("valid");
        let estimate = ks_digest_vs_reference(&digest_of(&new), &reference)
            .expect("non-empty")
            .statistic;
        let error = (exact - estimate).abs();
        cases.push(case(
            name,
            error < 0.004,
            format!("exact {exact:.5}, estimate {estimate:.5}, error {error:.5}"),
        ));
    }

    let whole = digest_of(&reference);
    let merged = reference
        .chunks(reference.len().div_ceil(16))
        .map(digest_of)
        .reduce(|a, b| a.merge(&b).expect("same config"))
        .expect("non-empty");
    let mut sorted = reference.clone();
    sorted.sort_by(f64::total_cmp);
    let gap = (1..1000)
        .map(|i| sorted[i * sorted.len() / 1000])
        .map(|x| (whole.cdf(x).expect("non-empty") - merged.cdf(x).expect("non-empty")).abs())
        .fold(0.0, f64::max);
    cases.push(case(
        "16-shard merge vs single digest",
        gap < 0.005,
        format!("max cdf gap {gap:.5}"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &[3]));
    let mut failures = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..5_000);
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
        let d = digest_of(&values);
        let bytes = d.to_bytes();
        if TDigest::from_bytes(&bytes)
            .map(|back| back.to_bytes() != bytes || back != d)
            .unwrap_or(true)
        {
            failures += 1;
        }
    }
    cases.push(case(
        "TDG1 round trip",
        failures == 0,
        format!("{failures} of 200 digests differed"),
    ));

    let attrs = attributes([("gender", "male"), ("age", "65"), ("location", "NY")]);
    let report = ReportMessage::new("selftest", 0, "model", attrs.clone(), &whole, 0).expect("non-empty digest");
    let round_trip = decode_report(&encode_report(&report))
        .map(|r| r == report)
        .unwrap_or(false);
    cases.push(case("RPT1 round trip", round_trip, String::new()));

    let routed = match_groups(&attrs, &example_groups(1, 0.05, "reference"));
    cases.push(case(
        "routing walkthrough",
        routed == ["group1", "group2", "group4"],
        routed.join(","),
    ));

    let half = digest_of(&reference[..reference.len() / 2]);
    let forward = ks_digest(&half, &merged).expect("non-empty").statistic;
    let backward = ks_digest(&merged, &half).expect("non-empty").statistic;
    cases.push(case(
        "ks symmetry and range",
        forward == backward && (0.0..=1.0).contains(&forward),
        format!("{forward} / {backward}"),
    ));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_cases_pass() {
        for c in run_selftest(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
