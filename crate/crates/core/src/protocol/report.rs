//! `RPT1` report envelope, little-endian throughout:
//!
//! ```text
//! magic "RPT1" | version u8
//! | report_id, client_id, model_id    (each: len u32 | UTF-8 bytes)
//! | attribute count u32 | count x (key, value) strings, keys ascending
//! | sample_count u64 | created_at_ms i64
//! | digest length u32 | TDG1 digest bytes
//! ```

use super::{Attributes, ProtocolError};
use crate::sketch::TDigest;

pub const REPORT_MAGIC: [u8; 4] = *b"RPT1";
pub const REPORT_FORMAT_VERSION: u8 = 1;

/// One client transmission: a serialized digest plus routing metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMessage {
    /// `<client_id>-<sequence>`, unique per client.
    pub report_id: String,
    pub client_id: String,
    pub model_id: String,
    pub attributes: Attributes,
    pub sample_count: u64,
    /// `TDG1` bytes.
    pub digest_payload: Vec<u8>,
    /// Milliseconds since the Unix epoch, UTC.
    pub created_at_ms: i64,
}

impl ReportMessage {
    pub fn new(
        client_id: &str,
        sequence: u64,
        model_id: &str,
        attributes: Attributes,
        digest: &TDigest,
        created_at_ms: i64,
    ) -> Result<Self, ProtocolError> {
        if digest.is_empty() {
            return Err(ProtocolError::InvalidReport("digest is empty".into()));
        }
        Ok(Self {
            report_id: report_id(client_id, sequence),
            client_id: client_id.to_string(),
            model_id: model_id.to_string(),
            attributes,
            sample_count: digest.total_weight().round() as u64,
            digest_payload: digest.to_bytes(),
            created_at_ms,
        })
    }

    pub fn digest(&self) -> Result<TDigest, ProtocolError> {
        Ok(TDigest::from_bytes(&self.digest_payload)?)
    }
}

pub fn report_id(client_id: &str, sequence: u64) -> String {
    format!("{client_id}-{sequence:010}")
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let len = u32::try_from(s.len()).expect("string shorter than 4 GiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_report(report: &ReportMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + report.digest_payload.len());
    out.extend_from_slice(&REPORT_MAGIC);
    out.push(REPORT_FORMAT_VERSION);
    put_str(&mut out, &report.report_id);
    put_str(&mut out, &report.client_id);
    put_str(&mut out, &report.model_id);
    let count = u32::try_from(report.attributes.len()).expect("attribute count fits u32");
    out.extend_from_slice(&count.to_le_bytes());
    for (key, value) in &report.attributes {
        put_str(&mut out, key);
        put_str(&mut out, value);
    }
    out.extend_from_slice(&report.sample_count.to_le_bytes());
    out.extend_from_slice(&report.created_at_ms.to_le_bytes());
    let len = u32::try_from(report.digest_payload.len()).expect("digest shorter than 4 GiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&report.digest_payload);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self.pos.checked_add(n).ok_or(ProtocolError::Truncated(self.pos))?;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or(ProtocolError::Truncated(self.pos))?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        Ok(self.take(N)?.try_into().expect("length N"))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        self.array().map(u32::from_le_bytes)
    }

    fn string(&mut self, field: &'static str) -> Result<String, ProtocolError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ProtocolError::InvalidUtf8(field))
    }
}

/// Decodes and validates a report, including the embedded digest and its
/// agreement with `sample_count`.
pub fn decode_report(bytes: &[u8]) -> Result<ReportMessage, ProtocolError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.array::<4>()?;
    if magic != REPORT_MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let [version] = c.array::<1>()?;
    if version != REPORT_FORMAT_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let report_id = c.string("report_id")?;
    let client_id = c.string("client_id")?;
    let model_id = c.string("model_id")?;
    let count = c.u32()?;
    let mut attributes = Attributes::new();
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let key = c.string("attribute key")?;
        let value = c.string("attribute value")?;
        if previous.as_ref().is_some_and(|p| *p >= key) {
            return Err(ProtocolError::NonCanonicalAttributes);
        }
        previous = Some(key.clone());
        attributes.insert(key, value);
    }
    let sample_count = u64::from_le_bytes(c.array()?);
    let created_at_ms = i64::from_le_bytes(c.array()?);
    let len = c.u32()? as usize;
    let digest_payload = c.take(len)?.to_vec();
    let trailing = bytes.len() - c.pos;
    if trailing != 0 {
        return Err(ProtocolError::TrailingBytes(trailing));
    }

    let digest = TDigest::from_bytes(&digest_payload)?;
    let weight = digest.total_weight();
    let declared = sample_count as f64;
    if (declared - weight).abs() > 1e-9 * declared.max(weight) || (sample_count == 0) != (weight == 0.0) {
        return Err(ProtocolError::SampleCountMismatch {
            declared: sample_count,
            digest_weight: weight,
        });
    }
    if sample_count == 0 {
        return Err(ProtocolError::InvalidReport("sample_count must be positive".into()));
    }

    Ok(ReportMessage {
        report_id,
        client_id,
        model_id,
        attributes,
        sample_count,
        digest_payload,
        created_at_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::attributes;

    fn digest(n: u32) -> TDigest {
        let mut d = TDigest::default();
        for i in 0..n {
            d.add(f64::from(i)).unwrap();
        }
        d
    }

    fn report(n: u32) -> ReportMessage {
        let attrs = attributes([("gender", "male"), ("age", "65"), ("location", "NY")]);
        ReportMessage::new("device-7", 3, "fraud-v2", attrs, &digest(n), 1_700_000_000_123).unwrap()
    }

    #[test]
    fn round_trip() {
        let r = report(50);
        assert_eq!(r.report_id, "device-7-0000000003");
        let bytes = encode_report(&r);
        assert_eq!(decode_report(&bytes).unwrap(), r);
        assert_eq!(encode_report(&r), bytes);
    }

    #[test]
    fn canonical_prefix() {
        let bytes = encode_report(&report(5));
        assert_eq!(&bytes[..4], b"RPT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &19u32.to_le_bytes());
        assert_eq!(&bytes[9..28], b"device-7-0000000003");
        // Attributes come out in key order regardless of insertion order.
        let keys_at = bytes.windows(3).position(|w| w == b"age").unwrap();
        let gender_at = bytes.windows(6).position(|w| w == b"gender").unwrap();
        assert!(keys_at < gender_at);
    }

    #[test]
    fn sample_count_must_match_digest() {
        let mut r = report(9);
        r.sample_count = 10;
        assert!(matches!(
            decode_report(&encode_report(&r)),
            Err(ProtocolError::SampleCountMismatch { declared: 10, .. })
        ));
    }

    #[test]
    fn framing_errors() {
        let bytes = encode_report(&report(20));
        for cut in 1..bytes.len() {
            assert!(decode_report(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
        }
        let mut extra = bytes.clone();
        extra.push(1);
        assert_eq!(decode_report(&extra), Err(ProtocolError::TrailingBytes(1)));
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(matches!(decode_report(&bad), Err(ProtocolError::BadMagic(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert_eq!(decode_report(&bad), Err(ProtocolError::UnsupportedVersion(9)));
    }

    #[test]
    fn empty_digest_is_not_a_report() {
        let err = ReportMessage::new("c", 0, "m", Attributes::new(), &TDigest::default(), 0);
        assert!(err.is_err());
    }
}
