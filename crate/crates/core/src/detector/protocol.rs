use serde::{Deserialize, Serialize};

use super::{featurize, ModelError};
use crate::capture::{PacketRecord, Transport};

/// Family of a device's responses to repeated identical commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseClass {
    Cleartext,
    StandardEncrypted,
    NonStandardEncrypted,
    Encoded,
}

pub const CLEARTEXT_MIN_PRINTABLE: f64 = 0.85;
pub const ENCODED_MIN_SIMILARITY: f64 = 0.9;

fn content_type(b: u8) -> bool {
    (0x14..=0x17).contains(&b)
}

pub fn is_tls_record(p: &[u8]) -> bool {
    p.len() >= 3 && content_type(p[0]) && p[1] == 0x03 && p[2] <= 0x04
}

pub fn is_dtls_record(p: &[u8]) -> bool {
    p.len() >= 3 && content_type(p[0]) && p[1] == 0xfe && p[2] >= 0xfd
}

pub fn is_quic_long_header(p: &[u8]) -> bool {
    p.len() >= 5 && p[0] & 0x80 != 0 && p[1..5] == [0, 0, 0, 1]
}

pub fn detect_standard_security_protocol(records: &[PacketRecord]) -> bool {
    records.iter().any(|r| match r.transport {
        Transport::Tcp => is_tls_record(&r.payload),
        Transport::Udp => is_quic_long_header(&r.payload) || is_dtls_record(&r.payload),
    })
}

/// Matching positions over the longer length; 1.0 for two empty inputs.
pub fn hamming_similarity(a: &[u8], b: &[u8]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / longest as f64
}

// Sorting first makes the float sum independent of sample order.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn classify_response_type(samples: &[Vec<u8>]) -> Result<ResponseClass, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::InvalidParameter(
            "response classification needs at least one sample".into(),
        ));
    }

    if samples
        .iter()
        .any(|s| is_tls_record(s) || is_dtls_record(s) || is_quic_long_header(s))
    {
        return Ok(ResponseClass::StandardEncrypted);
    }

    let ratios: Vec<f64> = samples
        .iter()
        .map(|s| featurize(s).printable_ratio)
        .collect();
    let printable = order_free_mean(ratios);
    if printable >= CLEARTEXT_MIN_PRINTABLE {
        return Ok(ResponseClass::Cleartext);
    }

    if samples.iter().all(|s| s == &samples[0]) {
        return Ok(ResponseClass::Encoded);
    }
    let mut sims = Vec::new();
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            sims.push(hamming_similarity(&samples[i], &samples[j]));
        }
    }
    if order_free_mean(sims) >= ENCODED_MIN_SIMILARITY {
        Ok(ResponseClass::Encoded)
    } else {
        Ok(ResponseClass::NonStandardEncrypted)
    }
}
