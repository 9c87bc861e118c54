//! Mergeable t-digest.
//!
//! This is the clustering flavour of the t-digest: every inserted value is
//! absorbed into its nearest centroid when the centroid's weight stays under
//! `4 * n * delta * q * (1 - q)` (with `q` the centroid's quantile position),
//! otherwise it starts a new centroid. When the centroid count exceeds
//! `ceil(k_limit / delta)` the digest is rebuilt by reinserting its centroids
//! in a seeded random order.
//!
//! The CDF estimator attributes half of each centroid's weight to its mean and
//! interpolates linearly between adjacent means, with linear ramps from the
//! observed minimum to the first mean and from the last mean to the observed
//! maximum. The estimate is therefore piecewise linear with breakpoints at
//! the extremes and the centroid means, see [`CdfCurve`].

mod codec;
mod curve;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::{DIGEST_FORMAT_VERSION, DIGEST_MAGIC};
pub use curve::CdfCurve;

/// Seed for the shuffle used by compression and merging. Fixed so that a
/// given sequence of operations always yields the same digest.
const SHUFFLE_SEED: u64 = 0x7d16_e57a_11ce_5eed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("invalid digest config: {0}")]
    InvalidConfig(String),
    #[error("value must be finite, got {0}")]
    NonFiniteValue(f64),
    #[error("weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
    #[error("operation requires a non-empty digest")]
    Empty,
    #[error("quantile must lie in [0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("cannot merge digests with different configs ({left:?} vs {right:?})")]
    ConfigMismatch { left: DigestConfig, right: DigestConfig },
    #[error("digest payload truncated: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad digest magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported digest format version {0}")]
    UnsupportedVersion(u8),
    #[error("centroid count mismatch: header says {declared}, payload holds {actual} bytes of centroids")]
    CountMismatch { declared: usize, actual: usize },
    #[error("corrupt digest payload: {0}")]
    Corrupt(String),
}

pub type Result<T, E = SketchError> = std::result::Result<T, E>;

/// Compression knobs of a digest.
///
/// `delta` bounds the weight a centroid may hold relative to the total, and
/// `k_limit` together with `delta` caps the number of centroids retained
/// after compression at `ceil(k_limit / delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DigestConfig {
    pub delta: f64,
    pub k_limit: u32,
}

impl DigestConfig {
    pub const DEFAULT_DELTA: f64 = 0.01;
    pub const DEFAULT_K_LIMIT: u32 = 25;

    pub fn new(delta: f64, k_limit: u32) -> Result<Self> {
        let config = Self { delta, k_limit };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SketchError::InvalidConfig(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if self.k_limit < 1 {
            return Err(SketchError::InvalidConfig("k_limit must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Maximum number of centroids kept once compression has run.
    pub fn max_centroids(&self) -> usize {
        (f64::from(self.k_limit) / self.delta).ceil() as usize
    }
}

impl Default for DigestConfig {
    fn default() -> Self {
        Self {
            delta: Self::DEFAULT_DELTA,
            k_limit: Self::DEFAULT_K_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub mean: f64,
    pub weight: f64,
}

impl Centroid {
    pub fn new(mean: f64, weight: f64) -> Self {
        Self { mean, weight }
    }

    fn absorb(&mut self, value: f64, weight: f64) {
        let combined = self.weight + weight;
        self.mean += weight * (value - self.mean) / combined;
        self.weight = combined;
    }
}

/// Fenwick tree over centroid weights, so a centroid's cumulative position
/// can be found without scanning the whole list on every insertion.
/// Invalidated by structural changes and rebuilt lazily.
#[derive(Debug, Clone, Default)]
struct PrefixWeights {
    tree: Vec<f64>,
    valid: bool,
}

impl PrefixWeights {
    fn invalidate(&mut self) {
        self.valid = false;
    }

    fn rebuild(&mut self, centroids: &[Centroid]) {
        let n = centroids.len();
        self.tree.clear();
        self.tree.resize(n + 1, 0.0);
        for (i, c) in centroids.iter().enumerate() {
            let idx = i + 1;
            self.tree[idx] += c.weight;
            let parent = idx + (idx & idx.wrapping_neg());
            if parent <= n {
                let carried = self.tree[idx];
                self.tree[parent] += carried;
            }
        }
        self.valid = true;
    }

    /// Sum of the weights of the first `count` centroids.
    fn prefix(&self, count: usize) -> f64 {
        let mut idx = count;
        let mut sum = 0.0;
        while idx > 0 {
            sum += self.tree[idx];
            idx &= idx - 1;
        }
        sum
    }

    fn add(&mut self, index: usize, weight: f64) {
        if !self.valid {
            return;
        }
        let n = self.tree.len() - 1;
        let mut idx = index + 1;
        while idx <= n {
            self.tree[idx] += weight;
            idx += idx & idx.wrapping_neg();
        }
    }
}

/// A t-digest summarizing a weighted stream of real values.
///
/// Not safe for concurrent mutation, but it is `Send` and may be handed
/// between threads.
#[derive(Debug, Clone)]
pub struct TDigest {
    config: DigestConfig,
    centroids: Vec<Centroid>,
    total_weight: f64,
    min: f64,
    max: f64,
    prefix: PrefixWeights,
}

impl PartialEq for TDigest {
    /// Bit-level equality of the serialized state.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.total_weight.to_bits() == other.total_weight.to_bits()
            && self.min.to_bits() == other.min.to_bits()
            && self.max.to_bits() == other.max.to_bits()
            && self.centroids.len() == other.centroids.len()
            && self
                .centroids
                .iter()
                .zip(&other.centroids)
                .all(|(a, b)| a.mean.to_bits() == b.mean.to_bits() && a.weight.to_bits() == b.weight.to_bits())
    }
}

impl Default for TDigest {
    fn default() -> Self {
        Self::empty(DigestConfig::default())
    }
}

impl TDigest {
    pub fn new(config: DigestConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::empty(config))
    }

    fn empty(config: DigestConfig) -> Self {
        Self {
            config,
            centroids: Vec::new(),
            total_weight: 0.0,
            min: f64::NAN,
            max: f64::NAN,
            prefix: PrefixWeights::default(),
        }
    }

    /// Rebuilds a digest from raw parts, checking every structural invariant.
    pub fn from_parts(
        config: DigestConfig,
        centroids: Vec<Centroid>,
        total_weight: f64,
        min: f64,
        max: f64,
    ) -> Result<Self> {
        config.validate()?;
        if centroids.is_empty() {
            if total_weight != 0.0 {
                return Err(SketchError::Corrupt(format!(
                    "empty digest with total weight {total_weight}"
                )));
            }
            return Ok(Self::empty(config));
        }
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(SketchError::Corrupt(format!("invalid extremes min={min} max={max}")));
        }
        let mut sum = 0.0;
        let mut previous = f64::NEG_INFINITY;
        for c in &centroids {
            if !c.mean.is_finite() || !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(SketchError::Corrupt(format!(
                    "invalid centroid mean={} weight={}",
                    c.mean, c.weight
                )));
            }
            if c.mean <= previous {
                return Err(SketchError::Corrupt("centroids are not strictly ascending".to_string()));
            }
            if c.mean < min || c.mean > max {
                return Err(SketchError::Corrupt(format!(
                    "centroid mean {} outside [{min}, {max}]",
                    c.mean
                )));
            }
            previous = c.mean;
            sum += c.weight;
        }
        if !total_weight.is_finite() || (total_weight - sum).abs() > 1e-9 * sum {
            return Err(SketchError::Corrupt(format!(
                "total weight {total_weight} disagrees with centroid sum {sum}"
            )));
        }
        Ok(Self {
            config,
            centroids,
            total_weight,
            min,
            max,
            prefix: PrefixWeights::default(),
        })
    }

    pub fn config(&self) -> DigestConfig {
        self.config
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn min(&self) -> Option<f64> {
        (!self.is_empty()).then_some(self.min)
    }

    pub fn max(&self) -> Option<f64> {
        (!self.is_empty()).then_some(self.max)
    }

    pub(crate) fn raw_extremes(&self) -> (f64, f64) {
        (self.min, self.max)
    }

    /// Adds `value` with unit weight.
    pub fn add(&mut self, value: f64) -> Result<()> {
        self.update(value, 1.0)
    }

    pub fn update(&mut self, value: f64, weight: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(SketchError::NonFiniteValue(value));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(SketchError::InvalidWeight(weight));
        }
        if self.is_empty() {
            self.min = value;
            self.max = value;
        } else {
            self.min = self.min.min(value);
            self.max = self.max.max(value);
        }
        self.insert(value, weight);
        if self.centroids.len() > self.config.max_centroids() {
            self.compress();
        }
        Ok(())
    }

    /// Inserts every value with unit weight. The batch is validated up front,
    /// so a non-finite value leaves the digest untouched.
    pub fn update_batch(&mut self, values: &[f64]) -> Result<()> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(SketchError::NonFiniteValue(*bad));
        }
        for &value in values {
            self.update(value, 1.0)?;
        }
        Ok(())
    }

    /// Core clustering step. Maintains `total_weight` but not the extremes.
    fn insert(&mut self, value: f64, weight: f64) {
        self.total_weight += weight;
        if self.centroids.is_empty() {
            self.centroids.push(Centroid::new(value, weight));
            self.prefix.invalidate();
            return;
        }

        let upper = self.centroids.partition_point(|c| c.mean < value);
        if upper < self.centroids.len() && self.centroids[upper].mean == value {
            self.centroids[upper].weight += weight;
            self.prefix.add(upper, weight);
            return;
        }

        // Nearest centroid first; on an exact tie the lower one is tried first.
        let mut candidates = [None, None];
        match (upper.checked_sub(1), (upper < self.centroids.len()).then_some(upper)) {
            (Some(lo), Some(hi)) => {
                let below = value - self.centroids[lo].mean;
                let above = self.centroids[hi].mean - value;
                if below < above {
                    candidates[0] = Some(lo);
                } else if above < below {
                    candidates[0] = Some(hi);
                } else {
                    candidates = [Some(lo), Some(hi)];
                }
            }
            (Some(lo), None) => candidates[0] = Some(lo),
            (None, Some(hi)) => candidates[0] = Some(hi),
            (None, None) => unreachable!("digest is non-empty"),
        }

        for index in candidates.into_iter().flatten() {
            let centroid = self.centroids[index];
            if centroid.weight + weight <= self.weight_bound(index) {
                self.centroids[index].absorb(value, weight);
                self.prefix.add(index, weight);
                self.restore_order(index);
                return;
            }
        }

        self.centroids.insert(upper, Centroid::new(value, weight));
        self.prefix.invalidate();
    }

    /// `4 * n * delta * q * (1 - q)` at the quantile position of centroid
    /// `index`.
    fn weight_bound(&mut self, index: usize) -> f64 {
        if !self.prefix.valid {
            self.prefix.rebuild(&self.centroids);
        }
        let n = self.total_weight;
        let q = (self.prefix.prefix(index) + self.centroids[index].weight / 2.0) / n;
        4.0 * n * self.config.delta * q * (1.0 - q)
    }

    /// After absorbing, a mean can only move towards the inserted value, which
    /// is nearer to it than to any other centroid. Rounding can still land it
    /// on a neighbour; fold such collisions so means stay strictly ascending.
    fn restore_order(&mut self, index: usize) {
        let mean = self.centroids[index].mean;
        if index + 1 < self.centroids.len() && self.centroids[index + 1].mean <= mean {
            self.fold_into(index, index + 1);
        } else if index > 0 && self.centroids[index - 1].mean >= mean {
            self.fold_into(index - 1, index);
        }
    }

    fn fold_into(&mut self, lo: usize, hi: usize) {
        let removed = self.centroids.remove(hi);
        let keep = &mut self.centroids[lo];
        keep.absorb(removed.mean, removed.weight);
        self.prefix.invalidate();
    }

    /// Rebuilds the digest by reinserting its centroids in a seeded random
    /// order. Total weight and extremes are preserved; the centroid count ends
    /// at or below [`DigestConfig::max_centroids`].
    pub fn compress(&mut self) {
        if self.centroids.is_empty() {
            return;
        }
        let mut centroids = std::mem::take(&mut self.centroids);
        centroids.shuffle(&mut ChaCha8Rng::seed_from_u64(SHUFFLE_SEED));
        let rebuilt = Self::reinsert(self.config, &centroids);
        self.centroids = rebuilt.centroids;
        self.prefix.invalidate();
        self.enforce_size_bound();
    }

    fn reinsert(config: DigestConfig, centroids: &[Centroid]) -> Self {
        let mut fresh = Self::empty(config);
        for c in centroids {
            fresh.insert(c.mean, c.weight);
        }
        fresh
    }

    /// Reinsertion practically always lands far below the bound; if it does
    /// not, fold the lightest adjacent pair until it does.
    fn enforce_size_bound(&mut self) {
        let bound = self.config.max_centroids().max(1);
        while self.centroids.len() > bound {
            let lightest = self
                .centroids
                .windows(2)
                .enumerate()
                .min_by(|(_, a), (_, b)| (a[0].weight + a[1].weight).total_cmp(&(b[0].weight + b[1].weight)))
                .map(|(i, _)| i)
                .expect("more than one centroid");
            self.fold_into(lightest, lightest + 1);
        }
    }

    /// Merges two digests with identical configs.
    ///
    /// The centroids of both inputs are pooled, put into a canonical order,
    /// shuffled with a fixed seed and reinserted into a fresh digest, so
    /// `a.merge(b)` and `b.merge(a)` produce the same digest. An empty operand
    /// is a neutral element.
    pub fn merge(&self, other: &TDigest) -> Result<TDigest> {
        if self.config != other.config {
            return Err(SketchError::ConfigMismatch {
                left: self.config,
                right: other.config,
            });
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(other.clone());
        }

        let mut pooled: Vec<Centroid> = self.centroids.iter().chain(&other.centroids).copied().collect();
        pooled.sort_by(|a, b| a.mean.total_cmp(&b.mean).then(a.weight.total_cmp(&b.weight)));
        pooled.shuffle(&mut ChaCha8Rng::seed_from_u64(SHUFFLE_SEED));

        let mut merged = Self::reinsert(self.config, &pooled);
        merged.total_weight = self.total_weight + other.total_weight;
        merged.min = self.min.min(other.min);
        merged.max = self.max.max(other.max);
        if merged.centroids.len() > self.config.max_centroids() {
            merged.compress();
        }
        Ok(merged)
    }

    /// Empties the digest, keeping its config.
    pub fn reset(&mut self) {
        *self = Self::empty(self.config);
    }

    /// Piecewise-linear CDF estimate; `None` for an empty digest.
    pub fn curve(&self) -> Option<CdfCurve> {
        CdfCurve::from_digest(self)
    }

    /// Estimated `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(SketchError::Empty);
        }
        if x < self.min {
            return Ok(0.0);
        }
        if x >= self.max {
            return Ok(1.0);
        }
        let n = self.total_weight;
        let upper = self.centroids.partition_point(|c| c.mean <= x);
        let before: f64 = self.centroids[..upper.saturating_sub(1)].iter().map(|c| c.weight).sum();
        let point = |index: usize, cumulative_before: f64| {
            let c = self.centroids[index];
            (c.mean, (cumulative_before + c.weight / 2.0) / n)
        };
        let (x0, y0) = if upper == 0 {
            (self.min, 0.0)
        } else {
            point(upper - 1, before)
        };
        let (x1, y1) = if upper == self.centroids.len() {
            (self.max, 1.0)
        } else {
            let last_weight = if upper == 0 {
                0.0
            } else {
                self.centroids[upper - 1].weight
            };
            point(upper, before + last_weight)
        };
        Ok(curve::interpolate(x, x0, y0, x1, y1))
    }

    /// Estimated value at cumulative probability `q`; the inverse of
    /// [`TDigest::cdf`].
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(SketchError::InvalidQuantile(q));
        }
        self.curve().ok_or(SketchError::Empty).map(|c| c.quantile(q))
    }

    /// Serializes to the `TDG1` wire format.
    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        codec::decode(bytes)
    }

    /// Size of [`TDigest::to_bytes`] output.
    pub fn encoded_len(&self) -> usize {
        codec::HEADER_LEN + 16 * self.centroids.len()
    }
}
