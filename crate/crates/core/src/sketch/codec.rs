//! `TDG1` binary format, all integers and floats little-endian:
//!
//! ```text
//! magic "TDG1" | version u8 | delta f64 | k_limit u32 | total_weight f64
//! | min f64 | max f64 | count u32 | count x (mean f64, weight f64)
//! ```
//!
//! An empty digest has count 0 and quiet-NaN extremes.

use super::{Centroid, DigestConfig, Result, SketchError, TDigest};

pub const DIGEST_MAGIC: [u8; 4] = *b"TDG1";
pub const DIGEST_FORMAT_VERSION: u8 = 1;

pub(super) const HEADER_LEN: usize = 4 + 1 + 8 + 4 + 8 + 8 + 8 + 4;

pub(super) fn encode(digest: &TDigest) -> Vec<u8> {
    let mut out = Vec::with_capacity(digest.encoded_len());
    let config = digest.config();
    let (min, max) = if digest.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        digest.raw_extremes()
    };
    out.extend_from_slice(&DIGEST_MAGIC);
    out.push(DIGEST_FORMAT_VERSION);
    out.extend_from_slice(&config.delta.to_le_bytes());
    out.extend_from_slice(&config.k_limit.to_le_bytes());
    out.extend_from_slice(&digest.total_weight().to_le_bytes());
    out.extend_from_slice(&min.to_le_bytes());
    out.extend_from_slice(&max.to_le_bytes());
    let count = u32::try_from(digest.len()).expect("centroid count fits in u32");
    out.extend_from_slice(&count.to_le_bytes());
    for c in digest.centroids() {
        out.extend_from_slice(&c.mean.to_le_bytes());
        out.extend_from_slice(&c.weight.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or(SketchError::Truncated {
            needed: end,
            available: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length is N"))
    }

    fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<TDigest> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take::<4>()?;
    if magic != DIGEST_MAGIC {
        return Err(SketchError::BadMagic(magic));
    }
    let [version] = r.take::<1>()?;
    if version != DIGEST_FORMAT_VERSION {
        return Err(SketchError::UnsupportedVersion(version));
    }
    let delta = r.f64()?;
    let k_limit = r.u32()?;
    let config = DigestConfig::new(delta, k_limit)?;
    let total_weight = r.f64()?;
    let min = r.f64()?;
    let max = r.f64()?;
    let count = r.u32()? as usize;

    let body = bytes.len() - r.pos;
    let declared = count.saturating_mul(16);
    if body < declared {
        return Err(SketchError::Truncated {
            needed: r.pos.saturating_add(declared),
            available: bytes.len(),
        });
    }
    if body > declared {
        return Err(SketchError::CountMismatch {
            declared: count,
            actual: body,
        });
    }

    if count == 0 {
        if total_weight != 0.0 {
            return Err(SketchError::Corrupt(format!(
                "empty digest with total weight {total_weight}"
            )));
        }
        return TDigest::new(config);
    }
    for (name, value) in [("total_weight", total_weight), ("min", min), ("max", max)] {
        if !value.is_finite() {
            return Err(SketchError::Corrupt(format!("{name} is not finite")));
        }
    }
    let mut centroids = Vec::with_capacity(count);
    for _ in 0..count {
        let mean = r.f64()?;
        let weight = r.f64()?;
        centroids.push(Centroid::new(mean, weight));
    }
    TDigest::from_parts(config, centroids, total_weight, min, max)
}
