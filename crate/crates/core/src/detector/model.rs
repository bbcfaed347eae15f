use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::iforest::IsolationForest;
use super::lof::Lof;
use super::{FeatureVector, ModelError, FEATURE_DIM};

pub const MODEL_FORMAT: &str = "replayprobe-model";
pub const MODEL_VERSION: u32 = 1;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 1.5;
pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_MAX_SUBSAMPLE: usize = 256;
pub const DEFAULT_ANOMALY_CUTOFF: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lof,
    IsolationForest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Regular,
    Irregular,
}

/// Per-dimension z-score parameters from the training set.
///
/// Constant dimensions get scale 1 rather than being removed, so a query that
/// departs from a constant training value still moves away from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[[f64; FEATURE_DIM]]) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; FEATURE_DIM];
        let mut scale = vec![0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            let mut column: Vec<f64> = rows.iter().map(|r| r[d]).collect();
            column.sort_by(f64::total_cmp);
            mean[d] = column.iter().sum::<f64>() / n;
            let var = column
                .iter()
                .map(|x| (x - mean[d]) * (x - mean[d]))
                .sum::<f64>()
                / n;
            scale[d] = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Lof {
        k_requested: usize,
        threshold: f64,
        lof: Lof,
    },
    IsolationForest {
        anomaly_cutoff: f64,
        forest: IsolationForest,
    },
}

/// A trained one-class detector over response features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyModel {
    pub training_size: usize,
    pub standardization: Standardizer,
    pub detector: Detector,
}

fn rows(training: &[FeatureVector]) -> Result<Vec<[f64; FEATURE_DIM]>, ModelError> {
    if training.len() < 2 {
        return Err(ModelError::InsufficientTraining { n: training.len() });
    }
    Ok(training.iter().map(FeatureVector::to_array).collect())
}

impl NoveltyModel {
    pub fn train_lof(training: &[FeatureVector], k: usize) -> Result<Self, ModelError> {
        let raw = rows(training)?;
        let standardization = Standardizer::fit(&raw);
        let points = raw.iter().map(|r| standardization.transform(r)).collect();
        let lof = Lof::fit(points, k)?;
        Ok(Self {
            training_size: training.len(),
            standardization,
            detector: Detector::Lof {
                k_requested: k,
                threshold: DEFAULT_THRESHOLD,
                lof,
            },
        })
    }

    pub fn train_isolation_forest(
        training: &[FeatureVector],
        trees: usize,
        subsample: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let raw = rows(training)?;
        let standardization = Standardizer::fit(&raw);
        let points: Vec<Vec<f64>> = raw.iter().map(|r| standardization.transform(r)).collect();
        let forest = IsolationForest::fit(&points, trees, subsample, seed)?;
        Ok(Self {
            training_size: training.len(),
            standardization,
            detector: Detector::IsolationForest {
                anomaly_cutoff: DEFAULT_ANOMALY_CUTOFF,
                forest,
            },
        })
    }

    /// Replaces the LOF threshold or isolation-forest cutoff.
    pub fn with_cutoff(mut self, value: f64) -> Result<Self, ModelError> {
        match &mut self.detector {
            Detector::Lof { threshold, .. } => *threshold = value,
            Detector::IsolationForest { anomaly_cutoff, .. } => *anomaly_cutoff = value,
        }
        self.validate()?;
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        match self.detector {
            Detector::Lof { .. } => ModelKind::Lof,
            Detector::IsolationForest { .. } => ModelKind::IsolationForest,
        }
    }

    pub fn k_eff(&self) -> Option<usize> {
        match &self.detector {
            Detector::Lof { lof, .. } => Some(lof.k()),
            Detector::IsolationForest { .. } => None,
        }
    }

    pub fn cutoff(&self) -> f64 {
        match self.detector {
            Detector::Lof { threshold, .. } => threshold,
            Detector::IsolationForest { anomaly_cutoff, .. } => anomaly_cutoff,
        }
    }

    /// LOF score, or isolation-forest anomaly score.
    pub fn score(&self, query: &FeatureVector) -> f64 {
        let z = self.standardization.transform(&query.to_array());
        match &self.detector {
            Detector::Lof { lof, .. } => lof.score(&z),
            Detector::IsolationForest { forest, .. } => forest.score(&z),
        }
    }

    pub fn lof_score(&self, query: &FeatureVector) -> Option<f64> {
        matches!(self.detector, Detector::Lof { .. }).then(|| self.score(query))
    }

    pub fn classify(&self, query: &FeatureVector) -> Label {
        if self.score(query) > self.cutoff() {
            Label::Irregular
        } else {
            Label::Regular
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let s = &self.standardization;
        if s.mean.len() != FEATURE_DIM || s.scale.len() != FEATURE_DIM {
            return Err(ModelError::DimensionMismatch {
                expected: FEATURE_DIM,
                found: s.mean.len().min(s.scale.len()),
            });
        }
        if s.scale.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(ModelError::Format(
                "standardization scales must be positive".into(),
            ));
        }
        match &self.detector {
            Detector::Lof { threshold, lof, .. } => {
                if !(*threshold > 1.0 && threshold.is_finite()) {
                    return Err(ModelError::InvalidParameter(format!(
                        "LOF threshold must exceed 1, got {threshold}"
                    )));
                }
                if lof.dim() != FEATURE_DIM {
                    return Err(ModelError::DimensionMismatch {
                        expected: FEATURE_DIM,
                        found: lof.dim(),
                    });
                }
            }
            Detector::IsolationForest {
                anomaly_cutoff,
                forest,
            } => {
                if !(*anomaly_cutoff > 0.0 && *anomaly_cutoff < 1.0) {
                    return Err(ModelError::InvalidParameter(format!(
                        "anomaly cutoff must lie in (0, 1), got {anomaly_cutoff}"
                    )));
                }
                if forest.trees.is_empty() {
                    return Err(ModelError::InvalidParameter("forest has no trees".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("model serializes");
        let obj = doc.as_object_mut().expect("model is an object");
        obj.insert("format".into(), MODEL_FORMAT.into());
        obj.insert("version".into(), MODEL_VERSION.into());
        serde_json::to_string_pretty(&doc).expect("value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: serde_json::Value = serde_json::from_str(text)?;
        match doc.get("format").and_then(|f| f.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => {
                return Err(ModelError::Format(format!(
                    "expected format {MODEL_FORMAT:?}, found {other:?}"
                )))
            }
        }
        match doc.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            other => return Err(ModelError::UnsupportedVersion(other)),
        }
        let model: NoveltyModel = serde_json::from_value(doc)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
