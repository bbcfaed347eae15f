//! Simulated devices and a companion-app traffic generator.
//!
//! Each [`Behavior`] is a small network service with two states. The
//! [`Companion`] drives legitimate state changes and records them as pcap, so
//! the assessment pipeline can be exercised end to end on loopback.

mod companion;
mod device;
mod scripted;
pub mod wire;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::Transport;
use crate::verdict::{GroundTruth, Scenario};

pub use companion::{companion_session, default_training_script, trigger_state, Companion};
pub use device::{spawn_device, spawn_device_on, DeviceHandle};
pub use scripted::{spawn_scripted, ScriptRule, ScriptedDevice};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("failed to start simulated device on port {port}: {source}")]
    Spawn {
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("device at {endpoint} unreachable: {source}")]
    Unreachable {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol exchange with {behavior} device failed: {detail}")]
    Protocol { behavior: Behavior, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Behavior {
    /// Plain JSON commands and state echoes, no authentication.
    CleartextEcho,
    /// JSON commands carrying a signature over a static secret, no freshness.
    SignedCleartext,
    /// Fixed binary frames per state.
    EncodedFixed,
    /// Commands encrypted under a key issued at pairing; a restart issues a new key.
    SessionKey,
    /// TLS or DTLS records with per-session keys.
    TlsLike,
    /// Counter-protected frames that are never answered.
    Silent,
}

impl Behavior {
    pub const ALL: [Behavior; 6] = [
        Behavior::CleartextEcho,
        Behavior::SignedCleartext,
        Behavior::EncodedFixed,
        Behavior::SessionKey,
        Behavior::TlsLike,
        Behavior::Silent,
    ];

    pub fn default_transport(self) -> Transport {
        match self {
            Behavior::EncodedFixed => Transport::Udp,
            _ => Transport::Tcp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Behavior::CleartextEcho => "cleartext_echo",
            Behavior::SignedCleartext => "signed_cleartext",
            Behavior::EncodedFixed => "encoded_fixed",
            Behavior::SessionKey => "session_key",
            Behavior::TlsLike => "tls_like",
            Behavior::Silent => "silent",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Behavior::ALL
            .into_iter()
            .find(|b| b.name().replace('_', "") == norm)
            .ok_or_else(|| {
                let names: Vec<_> = Behavior::ALL.iter().map(|b| b.name()).collect();
                format!(
                    "unknown profile {s:?} (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DeviceState {
    /// The "on" state.
    Obverse,
    Reverse,
}

impl fmt::Display for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceState::Obverse => "OBVERSE",
            DeviceState::Reverse => "REVERSE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub behavior: Behavior,
    pub transport: Transport,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
    #[serde(default = "default_rekey")]
    pub rekey_on_restart: bool,
    /// Seeds secrets, session keys and device clocks; random when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_rekey() -> bool {
    true
}

impl DeviceProfile {
    pub fn new(behavior: Behavior) -> Self {
        Self {
            behavior,
            transport: behavior.default_transport(),
            port: 0,
            rekey_on_restart: true,
            seed: None,
        }
    }

    pub fn with_transport(mut self, transport: Transport) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Whether a replayed command takes effect in `scenario`.
    pub fn vulnerable(&self, scenario: Scenario) -> bool {
        match self.behavior {
            Behavior::CleartextEcho | Behavior::SignedCleartext | Behavior::EncodedFixed => true,
            Behavior::SessionKey => scenario == Scenario::NonRestart || !self.rekey_on_restart,
            Behavior::TlsLike | Behavior::Silent => false,
        }
    }

    pub fn ground_truth(&self, scenario: Scenario) -> GroundTruth {
        if self.vulnerable(scenario) {
            GroundTruth::Vulnerable
        } else {
            GroundTruth::NotVulnerable
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn behavior_names_parse() {
        for b in Behavior::ALL {
            assert_eq!(b.name().parse::<Behavior>().unwrap(), b);
        }
        assert_eq!(
            "SessionKey".parse::<Behavior>().unwrap(),
            Behavior::SessionKey
        );
        assert_eq!("tls-like".parse::<Behavior>().unwrap(), Behavior::TlsLike);
        assert!("toaster".parse::<Behavior>().is_err());
    }

    #[test]
    fn vulnerability_matrix() {
        use Scenario::*;
        let v = |b, s| DeviceProfile::new(b).vulnerable(s);
        for b in [
            Behavior::CleartextEcho,
            Behavior::SignedCleartext,
            Behavior::EncodedFixed,
        ] {
            assert!(v(b, NonRestart) && v(b, Restart));
        }
        assert!(v(Behavior::SessionKey, NonRestart) && !v(Behavior::SessionKey, Restart));
        for b in [Behavior::TlsLike, Behavior::Silent] {
            assert!(!v(b, NonRestart) && !v(b, Restart));
        }
        let mut sticky = DeviceProfile::new(Behavior::SessionKey);
        sticky.rekey_on_restart = false;
        assert!(sticky.vulnerable(Restart));
    }

    #[test]
    fn state_serializes_uppercase() {
        assert_eq!(
            serde_json::to_string(&DeviceState::Obverse).unwrap(),
            "\"OBVERSE\""
        );
    }
}
