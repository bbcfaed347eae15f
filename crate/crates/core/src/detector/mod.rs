//! Response featurization, novelty models and protocol classification.

mod features;
pub mod iforest;
pub mod lof;
mod model;
mod protocol;

use thiserror::Error;

pub use features::{featurize, FeatureVector, FEATURE_DIM, HISTOGRAM_BUCKETS};
pub use model::{
    Detector, Label, ModelKind, NoveltyModel, Standardizer, DEFAULT_ANOMALY_CUTOFF, DEFAULT_K,
    DEFAULT_MAX_SUBSAMPLE, DEFAULT_THRESHOLD, DEFAULT_TREES, MODEL_FORMAT, MODEL_VERSION,
};
pub use protocol::{
    classify_response_type, detect_standard_security_protocol, hamming_similarity, is_dtls_record,
    is_quic_long_header, is_tls_record, ResponseClass, CLEARTEXT_MIN_PRINTABLE,
    ENCODED_MIN_SIMILARITY,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("insufficient training data: {n} response(s), at least 2 required")]
    InsufficientTraining { n: usize },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed model document: {0}")]
    Format(String),
    #[error("unsupported model document version {0:?}")]
    UnsupportedVersion(Option<u64>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn train_lof(training: &[FeatureVector], k: usize) -> Result<NoveltyModel, ModelError> {
    NoveltyModel::train_lof(training, k)
}

pub fn train_isolation_forest(
    training: &[FeatureVector],
    trees: usize,
    subsample: usize,
    seed: u64,
) -> Result<NoveltyModel, ModelError> {
    NoveltyModel::train_isolation_forest(training, trees, subsample, seed)
}

/// `None` for non-LOF models.
pub fn lof_score(model: &NoveltyModel, query: &FeatureVector) -> Option<f64> {
    model.lof_score(query)
}

pub fn classify(model: &NoveltyModel, query: &FeatureVector) -> Label {
    model.classify(query)
}
