//! Detection phase: response check, protocol check, then the j-response
//! novelty decision.

use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::PacketRecord;
use crate::detector::{
    detect_standard_security_protocol, featurize, Label, ModelKind, NoveltyModel,
};
use crate::replay::ResponseQueue;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VerdictError {
    #[error("detection window j must be at least 1")]
    InvalidWindow,
    #[error("responses need classification but no trained model is available")]
    MissingModel,
    #[error("accuracy needs at least one verdict")]
    NoVerdicts,
    #[error("invalid verdict report: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Leading queue responses examined by the model.
    pub j: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { j: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Successful,
    Failed,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Successful => "SUCCESSFUL",
            Outcome::Failed => "FAILED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reason {
    NoResponse,
    StandardProtocol,
    AllIrregular,
    RegularFound,
}

impl Reason {
    pub fn outcome(self) -> Outcome {
        match self {
            Reason::RegularFound => Outcome::Successful,
            _ => Outcome::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub reason: Reason,
    pub labels: Vec<Label>,
}

impl Verdict {
    fn gate(reason: Reason) -> Self {
        Self {
            outcome: reason.outcome(),
            reason,
            labels: Vec::new(),
        }
    }

    /// FAILED only when every examined label is Irregular.
    pub fn from_labels(labels: Vec<Label>) -> Self {
        let reason = if labels.contains(&Label::Regular) {
            Reason::RegularFound
        } else {
            Reason::AllIrregular
        };
        Self {
            outcome: reason.outcome(),
            reason,
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Pass,
    Fail,
}

pub fn response_check(queue: &ResponseQueue) -> Check {
    if queue.is_empty() {
        Check::Fail
    } else {
        Check::Pass
    }
}

pub fn protocol_check(records: &[PacketRecord]) -> Check {
    if detect_standard_security_protocol(records) {
        Check::Fail
    } else {
        Check::Pass
    }
}

/// `model` may be absent when the device never answered during training; the
/// two gates still apply and an error is returned only if classification is
/// actually needed.
pub fn decide(
    queue: &ResponseQueue,
    records: &[PacketRecord],
    model: Option<&NoveltyModel>,
    config: &DetectionConfig,
) -> Result<Verdict, VerdictError> {
    if config.j == 0 {
        return Err(VerdictError::InvalidWindow);
    }
    if response_check(queue) == Check::Fail {
        return Ok(Verdict::gate(Reason::NoResponse));
    }
    if protocol_check(records) == Check::Fail {
        return Ok(Verdict::gate(Reason::StandardProtocol));
    }
    let model = model.ok_or(VerdictError::MissingModel)?;
    let labels = queue
        .payloads()
        .take(config.j)
        .map(|p| model.classify(&featurize(p)))
        .collect();
    Ok(Verdict::from_labels(labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Vulnerable,
    NotVulnerable,
}

impl GroundTruth {
    pub fn expected(self) -> Outcome {
        match self {
            GroundTruth::Vulnerable => Outcome::Successful,
            GroundTruth::NotVulnerable => Outcome::Failed,
        }
    }
}

pub fn evaluate_accuracy(verdicts: &[Verdict], truth: GroundTruth) -> Result<f64, VerdictError> {
    if verdicts.is_empty() {
        return Err(VerdictError::NoVerdicts);
    }
    let hits = verdicts
        .iter()
        .filter(|v| v.outcome == truth.expected())
        .count();
    Ok(hits as f64 / verdicts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NonRestart,
    Restart,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::NonRestart => "non_restart",
            Scenario::Restart => "restart",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non_restart" | "non-restart" => Ok(Scenario::NonRestart),
            "restart" => Ok(Scenario::Restart),
            other => Err(format!(
                "unknown scenario {other:?} (expected non_restart or restart)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTimestamps {
    pub generated_unix_ms: u64,
    /// Attack-relative arrival times of the examined responses.
    pub examined_arrivals_us: Vec<u64>,
}

/// Persisted form of one verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictReport {
    pub schema_version: u32,
    pub device_id: String,
    pub scenario: Scenario,
    pub outcome: Outcome,
    pub reason: Reason,
    pub labels: Vec<Label>,
    pub j: usize,
    pub model_kind: Option<ModelKind>,
    pub timestamps: ReportTimestamps,
}

impl VerdictReport {
    pub fn new(
        verdict: &Verdict,
        queue: &ResponseQueue,
        device_id: impl Into<String>,
        scenario: Scenario,
        config: &DetectionConfig,
        model_kind: Option<ModelKind>,
    ) -> Self {
        let generated_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            device_id: device_id.into(),
            scenario,
            outcome: verdict.outcome,
            reason: verdict.reason,
            labels: verdict.labels.clone(),
            j: config.j,
            model_kind,
            timestamps: ReportTimestamps {
                generated_unix_ms,
                examined_arrivals_us: queue
                    .entries
                    .iter()
                    .take(verdict.labels.len())
                    .map(|e| e.arrival_us)
                    .collect(),
            },
        }
    }

    pub fn verdict(&self) -> Verdict {
        Verdict {
            outcome: self.outcome,
            reason: self.reason,
            labels: self.labels.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), VerdictError> {
        let bad = |m: String| Err(VerdictError::InvalidReport(m));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {}",
                self.schema_version
            ));
        }
        if self.reason.outcome() != self.outcome {
            return bad(format!(
                "reason {:?} contradicts outcome {}",
                self.reason, self.outcome
            ));
        }
        if self.j == 0 || self.labels.len() > self.j {
            return bad(format!(
                "{} labels for window j = {}",
                self.labels.len(),
                self.j
            ));
        }
        if matches!(self.reason, Reason::AllIrregular | Reason::RegularFound)
            && self.labels.is_empty()
        {
            return bad("model-based reason without labels".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VerdictError> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }
}
