//! Training, attack and detection phases, and the repeated assessment loop
//! against a simulated device.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{
    check_local_connectivity, classify_direction, connections_interleave, parse_capture,
    segment_flows, CaptureError, Direction, Endpoint, Flow, PacketRecord, SessionConfig,
};
use crate::detector::{
    classify_response_type, featurize, FeatureVector, Label, ModelError, ModelKind, NoveltyModel,
    ResponseClass, DEFAULT_ANOMALY_CUTOFF, DEFAULT_K, DEFAULT_MAX_SUBSAMPLE, DEFAULT_THRESHOLD,
    DEFAULT_TREES,
};
use crate::replay::{run_attack, AttackRun, ReplayConfig, ReplayError};
use crate::sim::{
    default_training_script, spawn_device, Companion, DeviceProfile, DeviceState, SimError,
};
pub use crate::verdict::Scenario;
use crate::verdict::{
    decide, evaluate_accuracy, DetectionConfig, GroundTruth, Outcome, Reason, Verdict, VerdictError,
};

pub const ASSESSMENT_SCHEMA: &str = "replayprobe-assessment/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("NO-LOCAL-CONNECTIVITY: no packets between app and device in the training capture")]
    NoLocalConnectivity,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Detector choice and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Lof {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    IsolationForest {
        #[serde(default = "default_trees")]
        trees: usize,
        /// Defaults to min(256, n).
        #[serde(default)]
        subsample: Option<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_cutoff")]
        anomaly_cutoff: f64,
    },
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_trees() -> usize {
    DEFAULT_TREES
}
fn default_cutoff() -> f64 {
    DEFAULT_ANOMALY_CUTOFF
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Lof {
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ModelSpec {
    pub fn train(&self, training: &[FeatureVector]) -> Result<NoveltyModel, ModelError> {
        match *self {
            ModelSpec::Lof { k, threshold } => {
                NoveltyModel::train_lof(training, k)?.with_cutoff(threshold)
            }
            ModelSpec::IsolationForest {
                trees,
                subsample,
                seed,
                anomaly_cutoff,
            } => {
                let psi = subsample.unwrap_or(DEFAULT_MAX_SUBSAMPLE.min(training.len()));
                NoveltyModel::train_isolation_forest(training, trees, psi, seed)?
                    .with_cutoff(anomaly_cutoff)
            }
        }
    }
}

/// Result of the training phase.
#[derive(Debug, Clone)]
pub struct Training {
    pub records: Vec<PacketRecord>,
    pub responses: Vec<Vec<u8>>,
    pub response_class: Option<ResponseClass>,
    /// Absent when the responses cannot support a model.
    pub model: Option<NoveltyModel>,
    pub model_error: Option<String>,
}

pub fn responses_of(records: &[PacketRecord], session: &SessionConfig) -> Vec<Vec<u8>> {
    records
        .iter()
        .filter(|r| classify_direction(r, session) == Direction::Response)
        .map(|r| r.payload.clone())
        .collect()
}

pub fn train_phase(
    capture: &[u8],
    session: &SessionConfig,
    detector: &ModelSpec,
) -> Result<Training, PipelineError> {
    let records = parse_capture(capture, session)?;
    if !check_local_connectivity(&records) {
        return Err(PipelineError::NoLocalConnectivity);
    }
    let responses = responses_of(&records, session);
    let response_class = classify_response_type(&responses).ok();
    let features: Vec<FeatureVector> = responses.iter().map(|r| featurize(r)).collect();
    let (model, model_error) = match detector.train(&features) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(Training {
        records,
        responses,
        response_class,
        model,
        model_error,
    })
}

/// Result of the attack phase.
#[derive(Debug, Clone)]
pub struct AttackPhase {
    pub records: Vec<PacketRecord>,
    pub flows: Vec<Flow>,
    /// Captured TCP connections overlapped in time and were merged.
    pub interleaved: bool,
    pub run: AttackRun,
}

pub fn attack_phase(
    capture: &[u8],
    session: &SessionConfig,
    device: Endpoint,
    replay: &ReplayConfig,
) -> Result<AttackPhase, PipelineError> {
    let records = parse_capture(capture, session)?;
    let flows = segment_flows(&records, session);
    let interleaved = connections_interleave(&records, session);
    let run = run_attack(&flows, device, replay)?;
    Ok(AttackPhase {
        records,
        flows,
        interleaved,
        run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessConfig {
    pub profile: DeviceProfile,
    pub scenario: Scenario,
    pub repetitions: usize,
    pub replay: ReplayConfig,
    pub detection: DetectionConfig,
    pub model: ModelSpec,
    /// Wait after a restart before continuing.
    pub restart_delay_ms: u64,
    /// Address recorded as the app side in companion captures.
    pub app_ip: IpAddr,
    pub companion_seed: u64,
    pub training_script: Vec<DeviceState>,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            profile: DeviceProfile::new(crate::sim::Behavior::CleartextEcho),
            scenario: Scenario::NonRestart,
            repetitions: 50,
            replay: ReplayConfig::default(),
            detection: DetectionConfig::default(),
            model: ModelSpec::default(),
            restart_delay_ms: 1000,
            app_ip: IpAddr::V4(Ipv4Addr::LOCALHOST),
            companion_seed: 1,
            training_script: default_training_script(),
        }
    }
}

impl AssessConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.repetitions == 0 {
            return Err(PipelineError::InvalidConfig(
                "repetitions must be at least 1".into(),
            ));
        }
        if self.detection.j == 0 {
            return Err(PipelineError::InvalidConfig("j must be at least 1".into()));
        }
        self.replay.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub outcome: Outcome,
    pub reason: Reason,
    pub labels: Vec<Label>,
    pub flows: usize,
    pub queue_len: usize,
    /// Device state after the attack.
    pub observed_state: DeviceState,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub responses: usize,
    pub response_class: Option<ResponseClass>,
    pub model_kind: Option<ModelKind>,
    pub k_eff: Option<usize>,
    pub model_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub schema: String,
    pub device_id: String,
    pub profile: DeviceProfile,
    pub scenario: Scenario,
    pub repetitions: usize,
    pub ground_truth: GroundTruth,
    /// Fraction of verdicts matching the ground truth.
    pub accuracy: f64,
    /// Fraction of verdicts agreeing with the device state observed after each attack.
    pub observed_agreement: f64,
    pub reasons: BTreeMap<Reason, usize>,
    pub training: TrainingSummary,
    pub runs: Vec<RunRecord>,
    pub elapsed_ms: u64,
}

impl AssessmentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let r: Self = serde_json::from_str(text).map_err(VerdictError::from)?;
        if r.schema != ASSESSMENT_SCHEMA {
            return Err(PipelineError::InvalidConfig(format!(
                "unexpected assessment schema {:?}",
                r.schema
            )));
        }
        if r.runs.len() != r.repetitions {
            return Err(PipelineError::InvalidConfig(
                "run count does not match repetitions".into(),
            ));
        }
        Ok(r)
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        self.runs
            .iter()
            .map(|r| Verdict {
                outcome: r.outcome,
                reason: r.reason,
                labels: r.labels.clone(),
            })
            .collect()
    }
}

/// Spawns the profile, trains once from a companion session, then repeats
/// capture, optional restart, attack and detection.
pub fn assess(config: &AssessConfig) -> Result<AssessmentReport, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let handle = spawn_device(config.profile)?;
    let device = handle.endpoint();
    let session = SessionConfig::new(Endpoint::new(config.app_ip, 0), device)?;
    let mut companion = Companion::new(config.app_ip, config.companion_seed);

    let training_capture = companion.run_script(&handle, &config.training_script)?;
    let training = train_phase(&training_capture, &session, &config.model)?;
    let truth = config.profile.ground_truth(config.scenario);

    let mut runs = Vec::with_capacity(config.repetitions);
    let mut verdicts = Vec::with_capacity(config.repetitions);
    for repetition in 0..config.repetitions {
        companion.take_capture();
        companion.trigger(&handle, DeviceState::Obverse)?;
        let attack_capture = companion.take_capture();

        if config.scenario == Scenario::Restart {
            handle.restart_device();
            thread::sleep(Duration::from_millis(config.restart_delay_ms));
        }
        companion.trigger(&handle, DeviceState::Reverse)?;
        companion.take_capture();

        let attack = attack_phase(&attack_capture, &session, device, &config.replay)?;
        let verdict = decide(
            &attack.run.queue,
            &attack.records,
            training.model.as_ref(),
            &config.detection,
        )?;
        let observed_state = handle.query_state();
        runs.push(RunRecord {
            repetition,
            outcome: verdict.outcome,
            reason: verdict.reason,
            labels: verdict.labels.clone(),
            flows: attack.flows.len(),
            queue_len: attack.run.queue.len(),
            observed_state,
            correct: verdict.outcome == truth.expected(),
        });
        verdicts.push(verdict);
    }

    let accuracy = evaluate_accuracy(&verdicts, truth)?;
    let agree = runs
        .iter()
        .filter(|r| {
            (r.observed_state == DeviceState::Obverse) == (r.outcome == Outcome::Successful)
        })
        .count();
    let mut reasons = BTreeMap::new();
    for r in &runs {
        *reasons.entry(r.reason).or_insert(0) += 1;
    }

    Ok(AssessmentReport {
        schema: ASSESSMENT_SCHEMA.into(),
        device_id: format!(
            "{}/{}@{}",
            config.profile.behavior, config.profile.transport, device
        ),
        profile: config.profile,
        scenario: config.scenario,
        repetitions: config.repetitions,
        ground_truth: truth,
        accuracy,
        observed_agreement: agree as f64 / runs.len() as f64,
        reasons,
        training: TrainingSummary {
            responses: training.responses.len(),
            response_class: training.response_class,
            model_kind: training.model.as_ref().map(NoveltyModel::kind),
            k_eff: training.model.as_ref().and_then(NoveltyModel::k_eff),
            model_error: training.model_error,
        },
        runs,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}
