use serde::{Deserialize, Serialize};

pub const HISTOGRAM_BUCKETS: usize = 16;
pub const FEATURE_DIM: usize = 3 + HISTOGRAM_BUCKETS;

/// Fixed-length numeric summary of one response payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub length: f64,
    /// Shannon entropy of the byte distribution, bits per byte.
    pub entropy: f64,
    pub printable_ratio: f64,
    /// Bucket `i` holds the fraction of bytes in `[16i, 16i + 15]`.
    pub histogram: [f64; HISTOGRAM_BUCKETS],
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        out[0] = self.length;
        out[1] = self.entropy;
        out[2] = self.printable_ratio;
        out[3..].copy_from_slice(&self.histogram);
        out
    }

    pub fn from_array(values: [f64; FEATURE_DIM]) -> Self {
        let mut histogram = [0.0; HISTOGRAM_BUCKETS];
        histogram.copy_from_slice(&values[3..]);
        Self {
            length: values[0],
            entropy: values[1],
            printable_ratio: values[2],
            histogram,
        }
    }
}

fn is_printable(b: u8) -> bool {
    (0x20..=0x7e).contains(&b) || matches!(b, 0x09 | 0x0a | 0x0d)
}

pub fn featurize(payload: &[u8]) -> FeatureVector {
    if payload.is_empty() {
        return FeatureVector {
            length: 0.0,
            entropy: 0.0,
            printable_ratio: 0.0,
            histogram: [0.0; HISTOGRAM_BUCKETS],
        };
    }

    let mut counts = [0usize; 256];
    for &b in payload {
        counts[b as usize] += 1;
    }
    let n = payload.len() as f64;

    let entropy = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .clamp(0.0, 8.0);

    let printable = payload.iter().filter(|&&b| is_printable(b)).count() as f64 / n;

    let mut histogram = [0.0; HISTOGRAM_BUCKETS];
    for (bucket, chunk) in histogram.iter_mut().zip(counts.chunks_exact(16)) {
        *bucket = chunk.iter().sum::<usize>() as f64 / n;
    }

    FeatureVector {
        length: n,
        entropy,
        printable_ratio: printable,
        histogram,
    }
}
