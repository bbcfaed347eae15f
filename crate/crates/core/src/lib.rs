//! Replay-attack assessment for networked devices.
//!
//! The pipeline has three phases. Training learns what legitimate device
//! responses look like from a capture of companion-app traffic. The attack
//! phase replays captured request flows in reverse order and queues whatever
//! comes back. Detection decides whether the replay was accepted.
//!
//! [`sim`] provides mock devices and a companion client so the whole loop can
//! run without hardware.

pub mod capture;
pub mod detector;
pub mod pipeline;
pub mod replay;
pub mod sim;
pub mod verdict;

pub use capture::{
    check_local_connectivity, classify_direction, parse_capture, segment_flows, CaptureError,
    Direction, Endpoint, Flow, PacketRecord, SessionConfig, Transport, TransportFilter,
};
pub use detector::{
    classify_response_type, detect_standard_security_protocol, featurize, FeatureVector, Label,
    ModelError, ModelKind, NoveltyModel, ResponseClass,
};
pub use pipeline::{assess, AssessConfig, AssessmentReport, PipelineError, Scenario};
pub use replay::{run_attack, schedule, QueueEntry, ReplayConfig, ResponseQueue};
pub use sim::{Behavior, DeviceHandle, DeviceProfile, DeviceState};
pub use verdict::{decide, evaluate_accuracy, DetectionConfig, Outcome, Reason, Verdict};

/// Serde adapter storing byte strings as lowercase hex.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(deserializer)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
