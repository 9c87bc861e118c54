use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Synthetic transaction amounts: user `i` spends log-normally around a
/// personal location drawn from `N(location_mean, location_sd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub n_users: usize,
    pub samples_per_user: usize,
    pub location_mean: f64,
    pub location_sd: f64,
    /// Log-scale spread of one user's amounts.
    pub sigma: f64,
}

impl Default for PopulationModel {
    fn default() -> Self {
        Self {
            n_users: 1_000,
            samples_per_user: 100,
            location_mean: 3.5,
            location_sd: 0.6,
            sigma: 0.8,
        }
    }
}

impl PopulationModel {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = self.location_mean.is_finite()
            && self.location_sd.is_finite()
            && self.location_sd >= 0.0
            && self.sigma.is_finite()
            && self.sigma > 0.0;
        if !ok {
            return Err(HarnessError::InvalidParameter(format!("bad population model {self:?}")));
        }
        Ok(())
    }

    /// Enough users for `n` samples.
    pub fn with_total(mut self, n: usize) -> Self {
        self.n_users = n.div_ceil(self.samples_per_user.max(1));
        self
    }
}

/// Per-user sample streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    /// Generating location per user; absent for pseudo-users cut from data.
    pub locations: Option<Vec<f64>>,
    pub sigma: f64,
    pub streams: Vec<Vec<f64>>,
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64 + 1);
    rng
}

fn lognormal_stream(seed: u64, user: usize, location: f64, sigma: f64, n: usize) -> Vec<f64> {
    let dist = LogNormal::new(location, sigma).expect("validated parameters");
    let mut rng = user_rng(seed, user);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

pub fn generate_population(model: &PopulationModel, seed: u64) -> Result<Population, HarnessError> {
    model.validate()?;
    let mut meta = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(model.location_mean, model.location_sd).expect("validated parameters");
    let locations: Vec<f64> = (0..model.n_users).map(|_| spread.sample(&mut meta)).collect();
    let stream_seed = meta.random();
    let streams = locations
        .iter()
        .enumerate()
        .map(|(user, &loc)| lognormal_stream(stream_seed, user, loc, model.sigma, model.samples_per_user))
        .collect();
    Ok(Population {
        locations: Some(locations),
        sigma: model.sigma,
        streams,
    })
}

impl Population {
    /// Cuts observed data into consecutive pseudo-users.
    pub fn from_samples(samples: &[f64], samples_per_user: usize) -> Self {
        Self {
            locations: None,
            sigma: f64::NAN,
            streams: samples.chunks(samples_per_user.max(1)).map(<[f64]>::to_vec).collect(),
        }
    }

    /// New streams of the same lengths from the same users.
    pub fn resample(&self, seed: u64) -> Self {
        let Some(locations) = &self.locations else {
            return self.clone();
        };
        let streams = locations
            .iter()
            .zip(&self.streams)
            .enumerate()
            .map(|(user, (&loc, old))| lognormal_stream(seed, user, loc, self.sigma, old.len()))
            .collect();
        Self {
            locations: self.locations.clone(),
            sigma: self.sigma,
            streams,
        }
    }

    pub fn n_users(&self) -> usize {
        self.streams.len()
    }

    pub fn len(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Vec<f64> {
        self.streams.concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    /// Random transactions grow by the shift degree.
    Graded,
    /// Random users switch to a new spending distribution.
    Immediate,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::Graded => "graded",
            ShiftKind::Immediate => "immediate",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graded" => Ok(ShiftKind::Graded),
            "immediate" => Ok(ShiftKind::Immediate),
            other => Err(HarnessError::InvalidParameter(format!("unknown shift kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftScenario {
    pub kind: ShiftKind,
    /// Multiplicative increase, at least 1.
    pub degree: f64,
    /// Graded: share of transactions; immediate: share of users.
    pub affected_fraction: f64,
    pub seed: u64,
}

impl ShiftScenario {
    pub fn none() -> Self {
        Self {
            kind: ShiftKind::Graded,
            degree: 1.0,
            affected_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.degree >= 1.0 && self.degree.is_finite()) {
            return Err(HarnessError::InvalidParameter(format!(
                "shift degree must be >= 1, got {}",
                self.degree
            )));
        }
        if !(0.0..=1.0).contains(&self.affected_fraction) {
            return Err(HarnessError::InvalidParameter(format!(
                "affected fraction must be in [0, 1], got {}",
                self.affected_fraction
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.degree == 1.0 || self.affected_fraction == 0.0
    }
}

/// Perturbs `population` as `scenario` describes; deterministic in the
/// scenario seed.
pub fn apply_shift(population: &Population, scenario: &ShiftScenario) -> Result<Population, HarnessError> {
    scenario.validate()?;
    if scenario.is_identity() {
        return Ok(population.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut shifted = population.clone();
    match scenario.kind {
        ShiftKind::Graded => {
            let total = population.len();
            let k = (scenario.affected_fraction * total as f64).round() as usize;
            let mut picked = index::sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            let mut picked = picked.into_iter().peekable();
            let mut offset = 0;
            for stream in &mut shifted.streams {
                let end = offset + stream.len();
                while let Some(&i) = picked.peek().filter(|&&i| i < end) {
                    stream[i - offset] *= scenario.degree;
                    picked.next();
                }
                offset = end;
            }
        }
        ShiftKind::Immediate => {
            let users = population.n_users();
            let k = (scenario.affected_fraction * users as f64).round() as usize;
            let stream_seed: u64 = rng.random();
            let pool = population.samples();
            for user in index::sample(&mut rng, users, k) {
                let n = population.streams[user].len();
                shifted.streams[user] = match &population.locations {
                    Some(locations) => lognormal_stream(
                        stream_seed,
                        user,
                        locations[user] + scenario.degree.ln(),
                        population.sigma,
                        n,
                    ),
                    // Pseudo-users resample the observed amounts, scaled.
                    None => {
                        let mut user_rng = user_rng(stream_seed, user);
                        (0..n)
                            .map(|_| pool[user_rng.random_range(0..pool.len())] * scenario.degree)
                            .collect()
                    }
                };
            }
        }
    }
    Ok(shifted)
}

/// Numeric values of `column`, in file order, and how many rows were
/// skipped for not parsing as a finite number.
pub fn load_csv_amounts(path: impl AsRef<Path>, column: &str) -> Result<(Vec<f64>, usize), HarnessError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let at = headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| HarnessError::Data(format!("{}: no column named {column:?}", path.display())))?;
    let mut values = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let record = record.map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
        match record.get(at).map(|s| s.trim().parse::<f64>()) {
            Some(Ok(v)) if v.is_finite() => values.push(v),
            _ => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(HarnessError::Data(format!(
            "{}: column {column:?} has no numeric rows",
            path.display()
        )));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} non-numeric rows", path.display());
    }
    Ok((values, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ks::ks_exact;

    fn small(n_users: usize) -> PopulationModel {
        PopulationModel {
            n_users,
            ..PopulationModel::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_population(&small(50), 9).unwrap();
        assert_eq!(a, generate_population(&small(50), 9).unwrap());
        assert_ne!(a, generate_population(&small(50), 10).unwrap());
        assert!(a.samples().iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(generate_population(&small(0), 9).unwrap().is_empty());
        assert_eq!(generate_population(&small(1_000), 1).unwrap().len(), 100_000);
    }

    #[test]
    fn resample_keeps_users() {
        let a = generate_population(&small(20), 3).unwrap();
        let b = a.resample(4);
        assert_eq!(a.locations, b.locations);
        assert_eq!(a.len(), b.len());
        assert_ne!(a.streams, b.streams);
    }

    #[test]
    fn identity_shifts() {
        let pop = generate_population(&small(30), 5).unwrap();
        for (kind, degree, fraction) in [
            (ShiftKind::Graded, 1.0, 0.5),
            (ShiftKind::Graded, 2.0, 0.0),
            (ShiftKind::Immediate, 1.0, 0.5),
            (ShiftKind::Immediate, 3.0, 0.0),
        ] {
            let s = ShiftScenario {
                kind,
                degree,
                affected_fraction: fraction,
                seed: 1,
            };
            assert_eq!(apply_shift(&pop, &s).unwrap(), pop);
        }
    }

    #[test]
    fn full_graded_shift_doubles_everything() {
        let pop = generate_population(&small(30), 5).unwrap();
        let s = ShiftScenario {
            kind: ShiftKind::Graded,
            degree: 2.0,
            affected_fraction: 1.0,
            seed: 1,
        };
        let shifted = apply_shift(&pop, &s).unwrap().samples();
        for (a, b) in pop.samples().iter().zip(&shifted) {
            assert_eq!(a * 2.0, *b);
        }
    }

    #[test]
    fn graded_shift_touches_the_requested_share() {
        let pop = generate_population(&small(100), 5).unwrap();
        let s = ShiftScenario {
            kind: ShiftKind::Graded,
            degree: 1.5,
            affected_fraction: 0.3,
            seed: 8,
        };
        let shifted = apply_shift(&pop, &s).unwrap();
        let changed = pop
            .samples()
            .iter()
            .zip(shifted.samples())
            .filter(|(a, b)| **a != *b)
            .count();
        assert_eq!(changed, 3_000);
        assert_eq!(shifted, apply_shift(&pop, &s).unwrap());
    }

    #[test]
    fn stronger_graded_shift_moves_further() {
        let pop = generate_population(&small(1_000), 11).unwrap();
        let base = pop.samples();
        let ks_at = |fraction| {
            let s = ShiftScenario {
                kind: ShiftKind::Graded,
                degree: 1.5,
                affected_fraction: fraction,
                seed: 2,
            };
            ks_exact(&base, &apply_shift(&pop, &s).unwrap().samples()).unwrap()
        };
        assert!(ks_at(0.3) > ks_at(0.1));
    }

    #[test]
    fn immediate_shift_replaces_whole_users() {
        let pop = generate_population(&small(200), 5).unwrap();
        let s = ShiftScenario {
            kind: ShiftKind::Immediate,
            degree: 4.0,
            affected_fraction: 0.1,
            seed: 3,
        };
        let shifted = apply_shift(&pop, &s).unwrap();
        let changed: Vec<bool> = pop.streams.iter().zip(&shifted.streams).map(|(a, b)| a != b).collect();
        assert_eq!(changed.iter().filter(|c| **c).count(), 20);
        for (a, b) in pop.streams.iter().zip(&shifted.streams) {
            assert!(a == b || a.iter().zip(b).all(|(x, y)| x != y));
        }

        let pseudo = Population::from_samples(&pop.samples(), 100);
        assert_eq!(pseudo.n_users(), 200);
        let shifted = apply_shift(&pseudo, &s).unwrap();
        assert_eq!(shifted.len(), pseudo.len());
        assert_ne!(shifted, pseudo);
    }

    #[test]
    fn scenario_validation() {
        let mut s = ShiftScenario::none();
        assert!(s.validate().is_ok());
        s.degree = 0.5;
        assert!(s.validate().is_err());
        s.degree = 2.0;
        s.affected_fraction = 1.5;
        assert!(s.validate().is_err());
        assert_eq!("immediate".parse::<ShiftKind>().unwrap(), ShiftKind::Immediate);
        assert!("sudden".parse::<ShiftKind>().is_err());
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tx.csv");
        std::fs::write(&path, "id,amount\n1,1.5\n2,abc\n3,2.5\n4,3.5\n").unwrap();
        let (values, skipped) = load_csv_amounts(&path, "amount").unwrap();
        assert_eq!(values, [1.5, 2.5, 3.5]);
        assert_eq!(skipped, 1);
        assert!(matches!(load_csv_amounts(&path, "price"), Err(HarnessError::Data(_))));
        assert!(load_csv_amounts(dir.path().join("missing.csv"), "amount").is_err());
        std::fs::write(&path, "amount\nx\n").unwrap();
        assert!(load_csv_amounts(&path, "amount").is_err());
    }
}
