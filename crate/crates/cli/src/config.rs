//! The TOML run file. Every key is optional; command-line flags override it.
//!
//! ```toml
//! scenario = "restart"
//! repetitions = 50
//! restart_delay_ms = 1000
//!
//! [session]
//! app = "192.168.1.20"
//! device = "192.168.1.50:6668"
//! transport = "both"
//!
//! [replay]
//! response_timeout_ms = 2000
//!
//! [detection]
//! j = 3
//!
//! [model]
//! kind = "lof"
//! k = 5
//! threshold = 1.5
//!
//! [profile]
//! behavior = "session_key"
//! seed = 7
//!
//! [paths]
//! training_capture = "training.pcap"
//! model = "device.model.json"
//! ```

use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use replayprobe_core::capture::{Endpoint, TransportFilter};
use replayprobe_core::detector::ModelKind;
use replayprobe_core::pipeline::ModelSpec;
use replayprobe_core::replay::ReplayConfig;
use replayprobe_core::verdict::DetectionConfig;
use replayprobe_core::Scenario;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<Scenario>,
    pub repetitions: Option<usize>,
    pub restart_delay_ms: Option<u64>,
    pub session: SessionSection,
    pub replay: Option<ReplayConfig>,
    pub detection: Option<DetectionConfig>,
    pub model: ModelSection,
    pub profile: ProfileSection,
    pub paths: PathsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    /// Address, or address:port.
    pub app: Option<String>,
    pub device: Option<Endpoint>,
    pub transport: Option<TransportFilter>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<ModelKind>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub trees: Option<usize>,
    pub subsample: Option<usize>,
    pub seed: Option<u64>,
    pub anomaly_cutoff: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub behavior: Option<String>,
    pub transport: Option<String>,
    pub port: Option<u16>,
    pub rekey_on_restart: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub training_capture: Option<PathBuf>,
    pub attack_capture: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub queue: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Accepts `ip` (any port) or `ip:port`.
pub fn parse_app(s: &str) -> Result<Endpoint, String> {
    if let Ok(ip) = s.parse::<IpAddr>() {
        return Ok(Endpoint::new(ip, 0));
    }
    s.parse::<Endpoint>().map_err(|e| e.to_string())
}

/// Model flags as given on the command line.
#[derive(Debug, Default, Clone)]
pub struct ModelOverrides {
    pub kind: Option<ModelKind>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub trees: Option<usize>,
    pub subsample: Option<usize>,
    pub seed: Option<u64>,
    pub anomaly_cutoff: Option<f64>,
}

pub fn model_spec(file: &ModelSection, flags: &ModelOverrides) -> ModelSpec {
    let kind = flags.kind.or(file.kind).unwrap_or(ModelKind::Lof);
    let defaults = match kind {
        ModelKind::Lof => ModelSpec::default(),
        ModelKind::IsolationForest => ModelSpec::IsolationForest {
            trees: replayprobe_core::detector::DEFAULT_TREES,
            subsample: None,
            seed: 0,
            anomaly_cutoff: replayprobe_core::detector::DEFAULT_ANOMALY_CUTOFF,
        },
    };
    match defaults {
        ModelSpec::Lof { k, threshold } => ModelSpec::Lof {
            k: flags.k.or(file.k).unwrap_or(k),
            threshold: flags.threshold.or(file.threshold).unwrap_or(threshold),
        },
        ModelSpec::IsolationForest {
            trees,
            seed,
            anomaly_cutoff,
            ..
        } => ModelSpec::IsolationForest {
            trees: flags.trees.or(file.trees).unwrap_or(trees),
            subsample: flags.subsample.or(file.subsample),
            seed: flags.seed.or(file.seed).unwrap_or(seed),
            anomaly_cutoff: flags
                .anomaly_cutoff
                .or(file.anomaly_cutoff)
                .unwrap_or(anomaly_cutoff),
        },
    }
}

#[derive(Debug, Default, Clone)]
pub struct ReplayOverrides {
    pub response_timeout_ms: Option<u64>,
    pub inter_request_delay_ms: Option<u64>,
    pub inter_flow_delay_ms: Option<u64>,
    pub connect_timeout_ms: Option<u64>,
}

pub fn replay_config(file: Option<&ReplayConfig>, flags: &ReplayOverrides) -> ReplayConfig {
    let base = file.copied().unwrap_or_default();
    ReplayConfig {
        response_timeout_ms: flags
            .response_timeout_ms
            .unwrap_or(base.response_timeout_ms),
        inter_request_delay_ms: flags
            .inter_request_delay_ms
            .unwrap_or(base.inter_request_delay_ms),
        inter_flow_delay_ms: flags
            .inter_flow_delay_ms
            .unwrap_or(base.inter_flow_delay_ms),
        connect_timeout_ms: flags.connect_timeout_ms.unwrap_or(base.connect_timeout_ms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.scenario, Some(Scenario::Restart));
        assert_eq!(cfg.session.device.unwrap().port, 6668);
        assert_eq!(cfg.replay.unwrap().response_timeout_ms, 2000);
        assert_eq!(cfg.profile.behavior.as_deref(), Some("session_key"));
    }

    #[test]
    fn flags_override_file_values() {
        let file = ModelSection {
            k: Some(7),
            threshold: Some(2.0),
            ..ModelSection::default()
        };
        let flags = ModelOverrides {
            k: Some(3),
            ..ModelOverrides::default()
        };
        assert_eq!(
            model_spec(&file, &flags),
            ModelSpec::Lof {
                k: 3,
                threshold: 2.0
            }
        );
    }

    #[test]
    fn isolation_forest_defaults() {
        let flags = ModelOverrides {
            kind: Some(ModelKind::IsolationForest),
            ..ModelOverrides::default()
        };
        assert!(matches!(
            model_spec(&ModelSection::default(), &flags),
            ModelSpec::IsolationForest {
                trees: 100,
                subsample: None,
                ..
            }
        ));
    }

    #[test]
    fn replay_flags_win() {
        let file = ReplayConfig {
            response_timeout_ms: 900,
            inter_flow_delay_ms: 10,
            ..ReplayConfig::default()
        };
        let flags = ReplayOverrides {
            response_timeout_ms: Some(100),
            ..ReplayOverrides::default()
        };
        let got = replay_config(Some(&file), &flags);
        assert_eq!(
            (got.response_timeout_ms, got.inter_flow_delay_ms),
            (100, 10)
        );
    }

    #[test]
    fn app_accepts_bare_address() {
        assert_eq!(parse_app("10.0.0.2").unwrap().port, 0);
        assert_eq!(parse_app("10.0.0.2:5000").unwrap().port, 5000);
        assert!(parse_app("phone").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
    }
}
