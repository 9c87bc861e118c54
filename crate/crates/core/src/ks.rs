//! Two-sample Kolmogorov-Smirnov statistics.
//!
//! [`ks_exact`] is the reference computation over raw samples. The sketch
//! based estimators exploit that a digest's CDF is piecewise linear with
//! known breakpoints: the difference of two such curves (or of a curve and
//! a step function) attains its supremum at a breakpoint, possibly as a
//! one-sided limit, so evaluating both limits on the union of breakpoints
//! gives the exact supremum of the sketched CDFs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sketch::{CdfCurve, DigestConfig, SketchError, TDigest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KsError {
    #[error("sample set is empty")]
    EmptySample,
    #[error("sample contains a non-finite value {0}")]
    NonFinite(f64),
    #[error("digest is empty")]
    EmptyDigest,
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Samples summarized by the new (aggregated) digest.
    pub n_new: u64,
    pub n_ref: u64,
    /// Distinct evaluation points.
    pub grid_size: usize,
    pub group_id: Option<String>,
}

/// The training-time distribution new data is compared against.
///
/// Holds the raw samples, used for the exact comparison, and a digest built
/// from them with the production config, for memory-constrained comparisons.
#[derive(Debug, Clone)]
pub struct ReferenceDistribution {
    sorted_samples: Vec<f64>,
    reference_digest: TDigest,
}

impl ReferenceDistribution {
    pub fn new(mut samples: Vec<f64>, config: DigestConfig) -> Result<Self, KsError> {
        check_samples(&samples)?;
        let mut reference_digest = TDigest::new(config)?;
        reference_digest.update_batch(&samples)?;
        samples.sort_by(f64::total_cmp);
        Ok(Self {
            sorted_samples: samples,
            reference_digest,
        })
    }

    pub fn sorted_samples(&self) -> &[f64] {
        &self.sorted_samples
    }

    pub fn digest(&self) -> &TDigest {
        &self.reference_digest
    }

    pub fn len(&self) -> usize {
        self.sorted_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_samples.is_empty()
    }
}

fn check_samples(samples: &[f64]) -> Result<(), KsError> {
    if samples.is_empty() {
        return Err(KsError::EmptySample);
    }
    match samples.iter().find(|v| !v.is_finite()) {
        Some(bad) => Err(KsError::NonFinite(*bad)),
        None => Ok(()),
    }
}

/// Exact two-sample statistic `sup_x |F_a(x) - F_b(x)|` over the empirical
/// CDFs of `a` and `b`.
pub fn ks_exact(a: &[f64], b: &[f64]) -> Result<f64, KsError> {
    check_samples(a)?;
    check_samples(b)?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(ks_exact_sorted(&a, &b))
}

/// [`ks_exact`] on inputs that are already sorted ascending.
pub fn ks_exact_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut stat: f64 = 0.0;
    // Both ECDFs are right-continuous steps, so checking after each distinct
    // value has been consumed from both sides covers every plateau.
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        stat = stat.max((i as f64 / na - j as f64 / nb).abs());
    }
    // Once one side is exhausted its ECDF is 1 and the other's only rises.
    stat.max((i as f64 / na - j as f64 / nb).abs())
}

/// Estimated statistic between two digests.
pub fn ks_digest(a: &TDigest, b: &TDigest) -> Result<KsResult, KsError> {
    let ca = a.curve().ok_or(KsError::EmptyDigest)?;
    let cb = b.curve().ok_or(KsError::EmptyDigest)?;
    let grid = merged_grid(ca.breakpoints(), cb.breakpoints());
    let statistic = grid
        .iter()
        .map(|&x| {
            let left = (ca.left(x) - cb.left(x)).abs();
            let right = (ca.right(x) - cb.right(x)).abs();
            left.max(right)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic,
        n_new: a.total_weight().round() as u64,
        n_ref: b.total_weight().round() as u64,
        grid_size: grid.len(),
        group_id: None,
    })
}

/// Estimated statistic between a digest and the exact empirical CDF of a
/// reference sample.
pub fn ks_digest_vs_reference(digest: &TDigest, reference: &ReferenceDistribution) -> Result<KsResult, KsError> {
    let curve = digest.curve().ok_or(KsError::EmptyDigest)?;
    let samples = reference.sorted_samples();
    if samples.is_empty() {
        return Err(KsError::EmptySample);
    }
    let statistic = curve_vs_ecdf(&curve, samples);
    let grid = merged_grid(curve.breakpoints(), samples);
    Ok(KsResult {
        statistic,
        n_new: digest.total_weight().round() as u64,
        n_ref: samples.len() as u64,
        grid_size: grid.len(),
        group_id: None,
    })
}

/// Compares against the reference's own digest instead of its raw samples.
pub fn ks_digest_vs_reference_digest(digest: &TDigest, reference: &ReferenceDistribution) -> Result<KsResult, KsError> {
    let mut result = ks_digest(digest, reference.digest())?;
    result.n_ref = reference.len() as u64;
    Ok(result)
}

/// `sup_x |F(x) - E(x)|` for a piecewise-linear `F` and the ECDF `E` of
/// `sorted`, evaluated with one sweep over the union of breakpoints and
/// sample values.
fn curve_vs_ecdf(curve: &CdfCurve, sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let breaks = curve.breakpoints();
    let (mut bi, mut si) = (0, 0);
    let mut stat: f64 = 0.0;
    while bi < breaks.len() || si < sorted.len() {
        let x = match (breaks.get(bi), sorted.get(si)) {
            (Some(&b), Some(&s)) => b.min(s),
            (Some(&b), None) => b,
            (None, Some(&s)) => s,
            (None, None) => unreachable!(),
        };
        let below = si;
        while si < sorted.len() && sorted[si] <= x {
            si += 1;
        }
        while bi < breaks.len() && breaks[bi] <= x {
            bi += 1;
        }
        let ecdf_left = below as f64 / n;
        let ecdf_right = si as f64 / n;
        stat = stat
            .max((curve.left(x) - ecdf_left).abs())
            .max((curve.right(x) - ecdf_right).abs());
    }
    stat
}

/// Sorted union of two ascending sequences without duplicates.
fn merged_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut grid = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let take_a = j >= b.len() || (i < a.len() && a[i] <= b[j]);
        let x = if take_a {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        if grid.last() != Some(&x) {
            grid.push(x);
        }
    }
    grid
}
