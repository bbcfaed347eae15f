//! Attack phase: reverse-order replay of captured flows.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpStream, UdpSocket};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{Endpoint, Flow, Transport};

const POLL: Duration = Duration::from_millis(10);
const READ_BUF: usize = 64 * 1024;

pub const TRANSCRIPT_SCHEMA: &str = "replayprobe-transcript/1";
pub const QUEUE_SCHEMA: &str = "replayprobe-queue/1";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid replay configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Idle time after the last request or response before a flow is closed.
    pub response_timeout_ms: u64,
    pub inter_request_delay_ms: u64,
    pub inter_flow_delay_ms: u64,
    pub connect_timeout_ms: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            response_timeout_ms: 2000,
            inter_request_delay_ms: 50,
            inter_flow_delay_ms: 200,
            connect_timeout_ms: 1000,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        for (name, v) in [
            ("response_timeout_ms", self.response_timeout_ms),
            ("inter_request_delay_ms", self.inter_request_delay_ms),
            ("inter_flow_delay_ms", self.inter_flow_delay_ms),
            ("connect_timeout_ms", self.connect_timeout_ms),
        ] {
            if v == 0 {
                return Err(ReplayError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    /// Microseconds since the start of the attack.
    pub arrival_us: u64,
    /// Index of the source flow in capture order.
    pub flow_index: usize,
    #[serde(with = "crate::hex_bytes")]
    pub payload: Vec<u8>,
}

/// Responses in the order they arrived during the attack.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseQueue {
    pub entries: Vec<QueueEntry>,
}

impl ResponseQueue {
    /// Sorts by arrival; equal arrivals keep their given order.
    pub fn from_entries(mut entries: Vec<QueueEntry>) -> Self {
        entries.sort_by_key(|e| e.arrival_us);
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn payloads(&self) -> impl Iterator<Item = &[u8]> {
        self.entries.iter().map(|e| e.payload.as_slice())
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'a str,
            entries: &'a [QueueEntry],
        }
        serde_json::to_string_pretty(&Doc {
            schema: QUEUE_SCHEMA,
            entries: &self.entries,
        })
        .expect("queue serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            entries: Vec<QueueEntry>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != QUEUE_SCHEMA {
            return Err(serde::de::Error::custom(format!(
                "unexpected queue schema {:?}",
                doc.schema
            )));
        }
        if doc
            .entries
            .windows(2)
            .any(|w| w[0].arrival_us > w[1].arrival_us)
        {
            return Err(serde::de::Error::custom("queue arrivals are not ordered"));
        }
        Ok(Self {
            entries: doc.entries,
        })
    }
}

/// Last captured flow first.
pub fn schedule(flows: &[Flow]) -> Vec<Flow> {
    flows.iter().rev().cloned().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowReplay {
    /// (microseconds since the attack epoch, payload) in arrival order.
    pub responses: Vec<(u64, Vec<u8>)>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub position: usize,
    pub flow_index: usize,
    pub transport: Transport,
    pub request_lengths: Vec<usize>,
    pub response_count: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTranscript {
    pub schema: String,
    pub device: Endpoint,
    pub flows: Vec<TranscriptEntry>,
}

impl AttackTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let t: Self = serde_json::from_str(text)?;
        if t.schema != TRANSCRIPT_SCHEMA {
            return Err(serde::de::Error::custom(format!(
                "unexpected transcript schema {:?}",
                t.schema
            )));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRun {
    pub queue: ResponseQueue,
    pub transcript: AttackTranscript,
}

pub fn replay_flow(
    flow: &Flow,
    device: Endpoint,
    transport: Transport,
    config: &ReplayConfig,
) -> FlowReplay {
    replay_flow_at(flow, device, transport, config, Instant::now())
}

fn replay_flow_at(
    flow: &Flow,
    device: Endpoint,
    transport: Transport,
    config: &ReplayConfig,
    epoch: Instant,
) -> FlowReplay {
    let target = device.socket_addr();
    let result = match transport {
        Transport::Tcp => replay_tcp(flow, target, config, epoch),
        Transport::Udp => replay_udp(flow, target, config, epoch),
    };
    result.unwrap_or_else(|e| FlowReplay {
        responses: Vec::new(),
        notes: vec![format!("{transport} connection to {device} failed: {e}")],
    })
}

fn replay_tcp(
    flow: &Flow,
    target: SocketAddr,
    config: &ReplayConfig,
    epoch: Instant,
) -> io::Result<FlowReplay> {
    let mut stream =
        TcpStream::connect_timeout(&target, ReplayConfig::ms(config.connect_timeout_ms))?;
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    reader.set_read_timeout(Some(POLL))?;

    let out = exchange(
        flow,
        config,
        epoch,
        |payload| stream.write_all(payload),
        |buf| reader.read(buf),
        true,
    );
    let _ = stream.shutdown(std::net::Shutdown::Both);
    Ok(out)
}

fn replay_udp(
    flow: &Flow,
    target: SocketAddr,
    config: &ReplayConfig,
    epoch: Instant,
) -> io::Result<FlowReplay> {
    let local: SocketAddr = if target.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    };
    let socket = UdpSocket::bind(local)?;
    socket.connect(target)?;
    socket.set_read_timeout(Some(POLL))?;
    let sender = socket.try_clone()?;

    Ok(exchange(
        flow,
        config,
        epoch,
        |payload| sender.send(payload).map(|_| ()),
        |buf| socket.recv(buf),
        false,
    ))
}

/// Writes requests on the calling thread while a reader thread collects
/// responses until the idle timeout passes after the last write.
fn exchange<W, R>(
    flow: &Flow,
    config: &ReplayConfig,
    epoch: Instant,
    mut write: W,
    mut read: R,
    stream: bool,
) -> FlowReplay
where
    W: FnMut(&[u8]) -> io::Result<()>,
    R: FnMut(&mut [u8]) -> io::Result<usize> + Send,
{
    let timeout = ReplayConfig::ms(config.response_timeout_ms);
    let writes_done: Mutex<Option<Instant>> = Mutex::new(None);

    thread::scope(|s| {
        let reader = s.spawn(|| {
            let mut buf = vec![0u8; READ_BUF];
            let mut responses = Vec::new();
            let mut notes = Vec::new();
            let mut last_data: Option<Instant> = None;
            loop {
                match read(&mut buf) {
                    Ok(0) if stream => break,
                    Ok(0) => {}
                    Ok(n) => {
                        let now = Instant::now();
                        responses.push((
                            now.duration_since(epoch).as_micros() as u64,
                            buf[..n].to_vec(),
                        ));
                        last_data = Some(now);
                    }
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                    Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                    Err(e) => {
                        notes.push(format!("read stopped: {e}"));
                        break;
                    }
                }
                let done = *writes_done.lock().unwrap();
                if let Some(done) = done {
                    let quiet_since = last_data.map_or(done, |l| l.max(done));
                    if quiet_since.elapsed() >= timeout {
                        break;
                    }
                }
            }
            (responses, notes)
        });

        let mut write_notes = Vec::new();
        let delay = ReplayConfig::ms(config.inter_request_delay_ms);
        for (i, req) in flow.requests.iter().enumerate() {
            if i > 0 {
                thread::sleep(delay);
            }
            if let Err(e) = write(&req.payload) {
                write_notes.push(format!(
                    "request {} of {} not delivered: {e}",
                    i + 1,
                    flow.requests.len()
                ));
                break;
            }
        }
        *writes_done.lock().unwrap() = Some(Instant::now());

        let (responses, mut notes) = reader.join().expect("reader thread panicked");
        write_notes.append(&mut notes);
        FlowReplay {
            responses,
            notes: write_notes,
        }
    })
}

/// Replays `flows` in reverse capture order against `device`.
///
/// Unreachable flows contribute no responses and a transcript note.
pub fn run_attack(
    flows: &[Flow],
    device: Endpoint,
    config: &ReplayConfig,
) -> Result<AttackRun, ReplayError> {
    config.validate()?;
    let epoch = Instant::now();
    let mut entries = Vec::new();
    let mut transcript = Vec::with_capacity(flows.len());

    for (position, flow_index) in (0..flows.len()).rev().enumerate() {
        if position > 0 {
            thread::sleep(ReplayConfig::ms(config.inter_flow_delay_ms));
        }
        let flow = &flows[flow_index];
        let transport = flow.transport();
        let replay = replay_flow_at(flow, device, transport, config, epoch);
        transcript.push(TranscriptEntry {
            position,
            flow_index,
            transport,
            request_lengths: flow.requests.iter().map(|r| r.payload.len()).collect(),
            response_count: replay.responses.len(),
            notes: replay.notes,
        });
        entries.extend(
            replay
                .responses
                .into_iter()
                .map(|(arrival_us, payload)| QueueEntry {
                    arrival_us,
                    flow_index,
                    payload,
                }),
        );
    }

    Ok(AttackRun {
        queue: ResponseQueue::from_entries(entries),
        transcript: AttackTranscript {
            schema: TRANSCRIPT_SCHEMA.into(),
            device,
            flows: transcript,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::PacketRecord;
    use proptest::prelude::*;
    use std::net::TcpListener;

    fn flow(tag: u8, transport: Transport) -> Flow {
        let rec = PacketRecord {
            timestamp_us: tag as u64,
            src: "127.0.0.1:40000".parse().unwrap(),
            dst: "127.0.0.1:9".parse().unwrap(),
            transport,
            payload: vec![tag],
        };
        Flow {
            requests: vec![rec],
            responses: vec![],
        }
    }

    fn fast() -> ReplayConfig {
        ReplayConfig {
            response_timeout_ms: 100,
            inter_request_delay_ms: 5,
            inter_flow_delay_ms: 5,
            connect_timeout_ms: 200,
        }
    }

    #[test]
    fn schedule_reverses() {
        let fs: Vec<Flow> = (1..=3).map(|i| flow(i, Transport::Tcp)).collect();
        let tags: Vec<u8> = schedule(&fs)
            .iter()
            .map(|f| f.requests[0].payload[0])
            .collect();
        assert_eq!(tags, [3, 2, 1]);
        assert!(schedule(&[]).is_empty());
        assert_eq!(schedule(&fs[..1]), fs[..1].to_vec());
    }

    #[test]
    fn zero_durations_rejected() {
        let mut c = ReplayConfig::default();
        assert!(c.validate().is_ok());
        c.inter_flow_delay_ms = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn queue_sort_is_stable() {
        let e = |t, f| QueueEntry {
            arrival_us: t,
            flow_index: f,
            payload: vec![],
        };
        let q = ResponseQueue::from_entries(vec![e(5, 2), e(3, 1), e(5, 0)]);
        let order: Vec<usize> = q.entries.iter().map(|e| e.flow_index).collect();
        assert_eq!(order, [1, 2, 0]);
    }

    #[test]
    fn queue_json_round_trip() {
        let q = ResponseQueue::from_entries(vec![QueueEntry {
            arrival_us: 9,
            flow_index: 1,
            payload: vec![0, 255, 16],
        }]);
        assert!(q.to_json().contains("\"00ff10\""));
        assert_eq!(ResponseQueue::from_json(&q.to_json()).unwrap(), q);
    }

    #[test]
    fn refused_connection_yields_note() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let run = run_attack(&[flow(1, Transport::Tcp)], addr.into(), &fast()).unwrap();
        assert!(run.queue.is_empty());
        assert_eq!(run.transcript.flows[0].response_count, 0);
        assert!(!run.transcript.flows[0].notes.is_empty());
    }

    #[test]
    fn tcp_echo_collects_response() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut b = [0u8; 16];
            let n = s.read(&mut b).unwrap();
            s.write_all(&[b[0] + 100]).unwrap();
            b[..n].to_vec()
        });
        let r = replay_flow(
            &flow(7, Transport::Tcp),
            addr.into(),
            Transport::Tcp,
            &fast(),
        );
        assert_eq!(server.join().unwrap(), vec![7]);
        assert_eq!(r.responses.len(), 1);
        assert_eq!(r.responses[0].1, vec![107]);
    }

    #[test]
    fn empty_flow_list() {
        let run = run_attack(&[], "127.0.0.1:9".parse().unwrap(), &fast()).unwrap();
        assert!(run.queue.is_empty());
        assert!(run.transcript.flows.is_empty());
    }

    proptest! {
        #[test]
        fn schedule_is_an_involution(tags in proptest::collection::vec(any::<u8>(), 0..20)) {
            let fs: Vec<Flow> = tags.iter().map(|&t| flow(t, Transport::Udp)).collect();
            prop_assert_eq!(schedule(&schedule(&fs)), fs);
        }
    }
}
