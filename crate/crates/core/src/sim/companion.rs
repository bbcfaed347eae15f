use std::io::{ErrorKind, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpStream, UdpSocket};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wire::{self, RecordLayer, TlsKeys};
use super::{Behavior, DeviceHandle, DeviceState, SimError};
use crate::capture::{
    Endpoint, PacketRecord, PcapWriter, SegmentBuilder, Transport, TCP_ACK, TCP_FIN, TCP_PSH,
    TCP_SYN,
};

const REPLY_TIMEOUT: Duration = Duration::from_secs(3);
const POLL: Duration = Duration::from_millis(5);
/// Logical capture clock origin, microseconds.
const CLOCK_ORIGIN_US: u64 = 1_700_000_000_000_000;
const FRAME_STEP_US: u64 = 1_000;
/// Logical app ports sit below the usual ephemeral range.
const APP_PORT_BASE: u16 = 20_000;
const APP_PORT_SPAN: u16 = 10_000;
const DEFAULT_SEED: u64 = 0x5eed;

/// The `[OBVERSE, REVERSE] x 5` training script.
pub fn default_training_script() -> Vec<DeviceState> {
    [DeviceState::Obverse, DeviceState::Reverse].repeat(5)
}

/// Real socket to the device plus the logical view written to the capture.
struct Link {
    io: Io,
    buf: Vec<u8>,
    app: Endpoint,
    device: Endpoint,
    seq_app: u32,
    seq_dev: u32,
}

enum Io {
    Tcp(TcpStream),
    Udp(UdpSocket),
}

/// Legitimate companion-app client for a simulated device.
///
/// Keeps what a paired app would keep between commands (session key, frame
/// counter) and records every exchanged packet on a logical clock, so runs
/// with the same seeds produce identical captures.
pub struct Companion {
    app_ip: IpAddr,
    rng: ChaCha8Rng,
    clock_us: u64,
    connections: u16,
    session_key: Option<[u8; 16]>,
    counter: u64,
    frames: Vec<(u64, Vec<u8>)>,
}

impl Companion {
    pub fn new(app_ip: IpAddr, seed: u64) -> Self {
        Self {
            app_ip,
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock_us: CLOCK_ORIGIN_US,
            connections: 0,
            session_key: None,
            counter: 0,
            frames: Vec::new(),
        }
    }

    /// Pcap of everything exchanged since the previous call.
    pub fn take_capture(&mut self) -> Vec<u8> {
        let mut w = PcapWriter::new(Vec::new()).expect("writing to memory");
        for (ts, frame) in self.frames.drain(..) {
            w.write_frame(ts, &frame).expect("writing to memory");
        }
        w.into_inner()
    }

    pub fn run_script(
        &mut self,
        handle: &DeviceHandle,
        script: &[DeviceState],
    ) -> Result<Vec<u8>, SimError> {
        self.frames.clear();
        for &target in script {
            self.trigger(handle, target)?;
        }
        Ok(self.take_capture())
    }

    /// Sends one legitimate command and returns the exchanged payloads.
    pub fn trigger(
        &mut self,
        handle: &DeviceHandle,
        target: DeviceState,
    ) -> Result<Vec<PacketRecord>, SimError> {
        let profile = *handle.profile();
        let mut records = Vec::new();
        let mut link = self.open(handle)?;
        let protocol = |detail: String| SimError::Protocol {
            behavior: profile.behavior,
            detail,
        };

        match profile.behavior {
            Behavior::CleartextEcho => {
                let id = self.rng.random_range(10_000..100_000);
                self.send(&mut link, &wire::echo_request(id, target), &mut records)?;
                let reply = self.expect(&mut link, &mut records, |b| {
                    let lines = b.iter().filter(|&&c| c == b'\n').count();
                    (lines >= 2 || (lines == 1 && b.windows(7).any(|w| w == b"\"error\"")))
                        .then_some(b.len())
                })?;
                if reply.windows(7).any(|w| w == b"\"error\"") {
                    return Err(protocol("device rejected set_power".into()));
                }
            }
            Behavior::SignedCleartext => {
                let id = hex::encode(self.rng.random::<[u8; 16]>());
                let ts = self.clock_us / 1_000_000;
                let req = wire::signed_request(&id, ts, &handle.pairing_secret(), target);
                self.send(&mut link, &req, &mut records)?;
                let reply = self.expect(&mut link, &mut records, line)?;
                if !reply.windows(8).any(|w| w == b"\"SETACK\"") {
                    return Err(protocol("signature rejected".into()));
                }
            }
            Behavior::EncodedFixed => {
                let secret = handle.pairing_secret();
                self.send(
                    &mut link,
                    &wire::encoded_request(&secret, target),
                    &mut records,
                )?;
                let reply = self.expect(&mut link, &mut records, |b| {
                    (b.len() >= wire::ENCODED_LEN).then_some(wire::ENCODED_LEN)
                })?;
                if reply != wire::encoded_ack(&secret, target) {
                    return Err(protocol("unexpected acknowledgement frame".into()));
                }
            }
            Behavior::SessionKey => {
                let secret = handle.pairing_secret();
                let mut attempts = 0;
                loop {
                    let key = match self.session_key {
                        Some(k) => k,
                        None => {
                            self.send(&mut link, &wire::handshake_request(), &mut records)?;
                            let reply = self.expect(&mut link, &mut records, line)?;
                            let key = wire::parse_handshake_reply(&reply, &secret)
                                .ok_or_else(|| protocol("malformed handshake reply".into()))?;
                            self.session_key = Some(key);
                            key
                        }
                    };
                    self.send(
                        &mut link,
                        &wire::session_command(&key, target),
                        &mut records,
                    )?;
                    let reply = self.expect(&mut link, &mut records, line)?;
                    if wire::is_session_ack(&reply) {
                        break;
                    }
                    // Stale key after a device restart: pair again once.
                    self.session_key = None;
                    attempts += 1;
                    if attempts > 1 {
                        return Err(protocol("command rejected after re-pairing".into()));
                    }
                }
            }
            Behavior::TlsLike => {
                let layer = match profile.transport {
                    Transport::Tcp => RecordLayer::Tls,
                    Transport::Udp => RecordLayer::Dtls,
                };
                let client: [u8; 32] = self.rng.random();
                self.send(&mut link, &layer.client_hello(&client), &mut records)?;
                let hello = self.expect(&mut link, &mut records, |b| layer.complete_record(b))?;
                let server = layer
                    .hello_random(&hello, 2)
                    .ok_or_else(|| protocol("no server hello".into()))?;
                let keys = TlsKeys::derive(&client, &server, &handle.pairing_secret());
                let cmd = layer.app_data(&keys, 1, &wire::tls_command(target));
                self.send(&mut link, &cmd, &mut records)?;
                let reply = self.expect(&mut link, &mut records, |b| layer.complete_record(b))?;
                if layer.open_app_data(&keys, 2, &reply).is_none() {
                    return Err(protocol("bad application data reply".into()));
                }
            }
            Behavior::Silent => {
                self.counter = self.counter.max(handle.last_counter()) + 1;
                let frame = wire::silent_frame(&handle.pairing_secret(), self.counter, target);
                let before = handle.received_count();
                self.send(&mut link, &frame, &mut records)?;
                if let Io::Udp(_) = link.io {
                    wait_until(|| handle.received_count() > before)
                        .map_err(|_| protocol("device did not consume the frame".into()))?;
                }
            }
        }

        self.close(link)?;
        if handle.query_state() != target {
            return Err(protocol(format!("device did not reach {target}")));
        }
        Ok(records)
    }

    fn open(&mut self, handle: &DeviceHandle) -> Result<Link, SimError> {
        let device = handle.endpoint();
        let unreachable = |source| SimError::Unreachable {
            endpoint: device.to_string(),
            source,
        };
        let target = device.socket_addr();

        let (io, app_port) = match handle.profile().transport {
            Transport::Tcp => {
                let mut port = APP_PORT_BASE + self.connections % APP_PORT_SPAN;
                self.connections = self.connections.wrapping_add(1);
                if port == device.port {
                    port = APP_PORT_BASE + self.connections % APP_PORT_SPAN;
                    self.connections = self.connections.wrapping_add(1);
                }
                let s = TcpStream::connect_timeout(&target, REPLY_TIMEOUT).map_err(unreachable)?;
                s.set_nodelay(true).map_err(unreachable)?;
                s.set_read_timeout(Some(POLL)).map_err(unreachable)?;
                (Io::Tcp(s), port)
            }
            Transport::Udp => {
                let local: SocketAddr = if target.is_ipv4() {
                    (Ipv4Addr::UNSPECIFIED, 0).into()
                } else {
                    "[::]:0".parse().unwrap()
                };
                let s = UdpSocket::bind(local).map_err(unreachable)?;
                s.connect(target).map_err(unreachable)?;
                s.set_read_timeout(Some(POLL)).map_err(unreachable)?;
                let mut port = APP_PORT_BASE + APP_PORT_SPAN;
                if port == device.port {
                    port += 1;
                }
                (Io::Udp(s), port)
            }
        };

        let mut link = Link {
            io,
            buf: Vec::new(),
            app: Endpoint::new(self.app_ip, app_port),
            device,
            seq_app: self.rng.random(),
            seq_dev: self.rng.random(),
        };
        if let Io::Tcp(_) = link.io {
            self.segment(&link, true, TCP_SYN, &[]);
            link.seq_app = link.seq_app.wrapping_add(1);
            self.segment(&link, false, TCP_SYN | TCP_ACK, &[]);
            link.seq_dev = link.seq_dev.wrapping_add(1);
            self.segment(&link, true, TCP_ACK, &[]);
        }
        Ok(link)
    }

    fn emit(&mut self, frame: Vec<u8>) -> u64 {
        self.clock_us += FRAME_STEP_US;
        self.frames.push((self.clock_us, frame));
        self.clock_us
    }

    fn segment(&mut self, link: &Link, from_app: bool, flags: u8, payload: &[u8]) -> u64 {
        let frame = if from_app {
            SegmentBuilder::tcp(
                link.app,
                link.device,
                link.seq_app,
                link.seq_dev,
                flags,
                payload,
            )
        } else {
            SegmentBuilder::tcp(
                link.device,
                link.app,
                link.seq_dev,
                link.seq_app,
                flags,
                payload,
            )
        };
        self.emit(frame)
    }

    /// Logs one payload in both the capture and the returned records.
    fn log(
        &mut self,
        link: &mut Link,
        from_app: bool,
        payload: &[u8],
        records: &mut Vec<PacketRecord>,
    ) {
        let (src, dst) = if from_app {
            (link.app, link.device)
        } else {
            (link.device, link.app)
        };
        let (ts, transport) = match link.io {
            Io::Tcp(_) => {
                let ts = self.segment(link, from_app, TCP_PSH | TCP_ACK, payload);
                if from_app {
                    link.seq_app = link.seq_app.wrapping_add(payload.len() as u32);
                } else {
                    link.seq_dev = link.seq_dev.wrapping_add(payload.len() as u32);
                }
                self.segment(link, !from_app, TCP_ACK, &[]);
                (ts, Transport::Tcp)
            }
            Io::Udp(_) => (
                self.emit(SegmentBuilder::udp(src, dst, payload)),
                Transport::Udp,
            ),
        };
        records.push(PacketRecord {
            timestamp_us: ts,
            src,
            dst,
            transport,
            payload: payload.to_vec(),
        });
    }

    fn send(
        &mut self,
        link: &mut Link,
        payload: &[u8],
        records: &mut Vec<PacketRecord>,
    ) -> Result<(), SimError> {
        let device = link.device;
        let res = match &mut link.io {
            Io::Tcp(s) => s.write_all(payload),
            Io::Udp(s) => s.send(payload).map(|_| ()),
        };
        res.map_err(|source| SimError::Unreachable {
            endpoint: device.to_string(),
            source,
        })?;
        self.log(link, true, payload, records);
        Ok(())
    }

    /// Reads until `complete` reports the length of one whole reply.
    fn expect<F>(
        &mut self,
        link: &mut Link,
        records: &mut Vec<PacketRecord>,
        complete: F,
    ) -> Result<Vec<u8>, SimError>
    where
        F: Fn(&[u8]) -> Option<usize>,
    {
        let device = link.device;
        let unreachable = |source| SimError::Unreachable {
            endpoint: device.to_string(),
            source,
        };
        let deadline = Instant::now() + REPLY_TIMEOUT;
        let mut chunk = vec![0u8; 65536];
        loop {
            if let Some(n) = complete(&link.buf) {
                let reply: Vec<u8> = link.buf.drain(..n).collect();
                self.log(link, false, &reply, records);
                return Ok(reply);
            }
            if Instant::now() >= deadline {
                return Err(unreachable(ErrorKind::TimedOut.into()));
            }
            let got = match &mut link.io {
                Io::Tcp(s) => s.read(&mut chunk),
                Io::Udp(s) => s.recv(&mut chunk),
            };
            match got {
                Ok(0) if matches!(link.io, Io::Tcp(_)) => {
                    return Err(unreachable(ErrorKind::UnexpectedEof.into()))
                }
                Ok(n) => link.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => return Err(unreachable(e)),
            }
        }
    }

    /// TCP: half-close and wait for the device to close, so every request has
    /// been processed before returning.
    fn close(&mut self, mut link: Link) -> Result<(), SimError> {
        let Io::Tcp(stream) = &mut link.io else {
            return Ok(());
        };
        let _ = stream.shutdown(Shutdown::Write);
        let deadline = Instant::now() + REPLY_TIMEOUT;
        let mut sink = [0u8; 1024];
        loop {
            match stream.read(&mut sink) {
                Ok(0) => break,
                Ok(_) => {}
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if Instant::now() >= deadline {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        self.segment(&link, true, TCP_FIN | TCP_ACK, &[]);
        link.seq_app = link.seq_app.wrapping_add(1);
        self.segment(&link, false, TCP_FIN | TCP_ACK, &[]);
        link.seq_dev = link.seq_dev.wrapping_add(1);
        self.segment(&link, true, TCP_ACK, &[]);
        Ok(())
    }
}

fn line(b: &[u8]) -> Option<usize> {
    b.iter().position(|&c| c == b'\n').map(|p| p + 1)
}

fn wait_until(mut cond: impl FnMut() -> bool) -> Result<(), ()> {
    let deadline = Instant::now() + REPLY_TIMEOUT;
    while !cond() {
        if Instant::now() >= deadline {
            return Err(());
        }
        thread::sleep(POLL);
    }
    Ok(())
}

fn companion_seed(handle: &DeviceHandle) -> u64 {
    handle.profile().seed.unwrap_or(DEFAULT_SEED)
}

/// One-off legitimate command from a fresh companion.
pub fn trigger_state(
    handle: &DeviceHandle,
    target: DeviceState,
    app: Endpoint,
) -> Result<Vec<PacketRecord>, SimError> {
    Companion::new(app.addr, companion_seed(handle)).trigger(handle, target)
}

/// Runs `script` from a fresh companion and returns the recorded pcap.
pub fn companion_session(
    handle: &DeviceHandle,
    app: Endpoint,
    script: &[DeviceState],
) -> Result<Vec<u8>, SimError> {
    Companion::new(app.addr, companion_seed(handle)).run_script(handle, script)
}
