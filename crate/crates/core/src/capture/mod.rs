//! Packet capture ingestion.
//!
//! Captures are classic pcap streams. Parsing keeps one [`PacketRecord`] per
//! transport segment that carries payload bytes between the configured app and
//! device endpoints; flows are then cut from the record stream purely by
//! direction changes.

mod flows;
mod pcap;

use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flows::{connections_interleave, segment_flows, Flow};
pub use pcap::{
    parse_capture, records_from_source, FrameSource, PcapFrame, PcapReader, PcapWriter,
    SegmentBuilder, LINKTYPE_ETHERNET, PCAP_MAGIC, PCAP_MAGIC_SWAPPED, TCP_ACK, TCP_FIN, TCP_PSH,
    TCP_SYN,
};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error(
        "truncated pcap data at offset {offset}: needed {needed} bytes, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad pcap magic {magic:#010x} at offset {offset}")]
    BadMagic { offset: usize, magic: u32 },
    #[error("unsupported pcap link type {0} (only Ethernet, link type 1, is supported)")]
    UnsupportedLinkType(u32),
    #[error("invalid endpoint {0:?}: expected ip:port")]
    InvalidEndpoint(String),
    #[error("session config requires distinct app and device endpoints, both are {0}")]
    SameEndpoints(Endpoint),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An IP address and transport port.
///
/// A port of `0` on the app side of a [`SessionConfig`] matches any port,
/// since companion apps talk from ephemeral ports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

impl Endpoint {
    pub const fn new(addr: IpAddr, port: u16) -> Self {
        Self { addr, port }
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.addr, self.port)
    }

    /// Matches `other` exactly, or by address only when this endpoint's port is 0.
    pub fn matches(&self, other: &Endpoint) -> bool {
        self.addr == other.addr && (self.port == 0 || self.port == other.port)
    }

    pub fn is_loopback(&self) -> bool {
        self.addr.is_loopback()
    }
}

impl From<SocketAddr> for Endpoint {
    fn from(sa: SocketAddr) -> Self {
        Self::new(sa.ip(), sa.port())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.socket_addr().fmt(f)
    }
}

impl FromStr for Endpoint {
    type Err = CaptureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<SocketAddr>()
            .map(Endpoint::from)
            .map_err(|_| CaptureError::InvalidEndpoint(s.to_string()))
    }
}

impl Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    pub fn ip_protocol(self) -> u8 {
        match self {
            Transport::Tcp => 6,
            Transport::Udp => 17,
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        })
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" => Ok(Transport::Tcp),
            "udp" => Ok(Transport::Udp),
            other => Err(format!("unknown transport {other:?} (expected tcp or udp)")),
        }
    }
}

/// One captured transport payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Microseconds since the first frame of the capture.
    pub timestamp_us: u64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub transport: Transport,
    #[serde(with = "crate::hex_bytes")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportFilter {
    Tcp,
    Udp,
    Both,
}

impl TransportFilter {
    pub fn admits(self, transport: Transport) -> bool {
        match self {
            TransportFilter::Both => true,
            TransportFilter::Tcp => transport == Transport::Tcp,
            TransportFilter::Udp => transport == Transport::Udp,
        }
    }
}

impl FromStr for TransportFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" => Ok(TransportFilter::Tcp),
            "udp" => Ok(TransportFilter::Udp),
            "both" | "any" => Ok(TransportFilter::Both),
            other => Err(format!(
                "unknown transport filter {other:?} (expected tcp, udp or both)"
            )),
        }
    }
}

/// The app/device pair whose traffic is of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub app: Endpoint,
    pub device: Endpoint,
    #[serde(default)]
    pub transport: Option<TransportFilter>,
}

impl SessionConfig {
    pub fn new(app: Endpoint, device: Endpoint) -> Result<Self, CaptureError> {
        if app == device {
            return Err(CaptureError::SameEndpoints(app));
        }
        Ok(Self {
            app,
            device,
            transport: None,
        })
    }

    pub fn with_transport(mut self, filter: TransportFilter) -> Self {
        self.transport = Some(filter);
        self
    }

    pub fn admits_transport(&self, transport: Transport) -> bool {
        self.transport
            .unwrap_or(TransportFilter::Both)
            .admits(transport)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Request,
    Response,
    Unrelated,
}

pub fn classify_direction(record: &PacketRecord, config: &SessionConfig) -> Direction {
    if config.app.matches(&record.src) && config.device.matches(&record.dst) {
        Direction::Request
    } else if config.device.matches(&record.src) && config.app.matches(&record.dst) {
        Direction::Response
    } else {
        Direction::Unrelated
    }
}

/// True when the app and device exchanged at least one payload locally.
pub fn check_local_connectivity(records: &[PacketRecord]) -> bool {
    !records.is_empty()
}
