use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wire::{self, RecordLayer, Secret, SessionMessage, TlsKeys};
use super::{Behavior, DeviceProfile, DeviceState, SimError};
use crate::capture::{Endpoint, Transport};

const POLL: Duration = Duration::from_millis(20);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

enum Reply {
    Nothing,
    Send(Vec<u8>),
    SendAndClose(Vec<u8>),
}

#[derive(Default)]
struct TlsSession {
    keys: Option<TlsKeys>,
    client_seq: u64,
    server_seq: u64,
}

struct Core {
    behavior: Behavior,
    rekey_on_restart: bool,
    secret: Secret,
    state: DeviceState,
    session_key: [u8; 16],
    last_counter: u64,
    generation: u64,
    clock_s: u64,
    rng: ChaCha8Rng,
    received: Vec<Vec<u8>>,
    dtls: HashMap<SocketAddr, TlsSession>,
}

impl Core {
    fn new(profile: &DeviceProfile) -> Self {
        let seed = profile.seed.unwrap_or_else(rand::random);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let secret = rng.random();
        let session_key = rng.random();
        let clock_s = 1_700_000_000 + rng.random_range(0..1_000_000);
        Self {
            behavior: profile.behavior,
            rekey_on_restart: profile.rekey_on_restart,
            secret,
            state: DeviceState::Reverse,
            session_key,
            last_counter: 0,
            generation: 0,
            clock_s,
            rng,
            received: Vec::new(),
            dtls: HashMap::new(),
        }
    }

    fn restart(&mut self) {
        self.generation += 1;
        self.state = DeviceState::Reverse;
        self.dtls.clear();
        if self.behavior == Behavior::SessionKey && self.rekey_on_restart {
            self.session_key = self.rng.random();
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock_s += self.rng.random_range(1..30);
        self.clock_s
    }

    fn handle(&mut self, msg: &[u8], layer: RecordLayer, tls: &mut TlsSession) -> Reply {
        self.received.push(msg.to_vec());
        match self.behavior {
            Behavior::CleartextEcho => match wire::parse_echo_request(msg) {
                (id, Some(s)) => {
                    self.state = s;
                    Reply::Send(wire::echo_reply(id, s))
                }
                (id, None) => Reply::Send(wire::echo_error(id)),
            },
            Behavior::SignedCleartext => {
                let ts = self.tick();
                match wire::verify_signed_request(msg, &self.secret) {
                    Some(s) => {
                        self.state = s;
                        Reply::Send(wire::signed_ack(ts, &self.secret, s))
                    }
                    None => Reply::Send(wire::signed_error(ts)),
                }
            }
            Behavior::EncodedFixed => match wire::parse_encoded_request(msg, &self.secret) {
                Some(s) => {
                    self.state = s;
                    Reply::Send(wire::encoded_ack(&self.secret, s))
                }
                None => Reply::Send(wire::encoded_nak()),
            },
            Behavior::SessionKey => match wire::parse_session_message(msg, &self.session_key) {
                SessionMessage::Handshake => {
                    Reply::Send(wire::handshake_reply(&self.secret, &self.session_key))
                }
                SessionMessage::Command(Some(s)) => {
                    self.state = s;
                    Reply::Send(wire::session_ack(&self.session_key, s))
                }
                _ => Reply::Send(wire::session_error()),
            },
            Behavior::TlsLike => self.handle_tls(msg, layer, tls),
            Behavior::Silent => {
                if let Some((counter, s)) = wire::parse_silent_frame(msg, &self.secret) {
                    if counter > self.last_counter {
                        self.last_counter = counter;
                        self.state = s;
                    }
                }
                Reply::Nothing
            }
        }
    }

    fn handle_tls(&mut self, msg: &[u8], layer: RecordLayer, tls: &mut TlsSession) -> Reply {
        match &tls.keys {
            None => match layer.hello_random(msg, 1) {
                Some(client) => {
                    let server: [u8; 32] = self.rng.random();
                    tls.keys = Some(TlsKeys::derive(&client, &server, &self.secret));
                    tls.client_seq = 1;
                    tls.server_seq = 2;
                    Reply::Send(layer.server_hello(&server))
                }
                None => Reply::SendAndClose(layer.alert()),
            },
            Some(keys) => {
                let Some(plain) = layer.open_app_data(keys, tls.client_seq, msg) else {
                    return Reply::SendAndClose(layer.alert());
                };
                let Some(s) = wire::parse_tls_command(&plain) else {
                    return Reply::SendAndClose(layer.alert());
                };
                self.state = s;
                let reply = layer.app_data(keys, tls.server_seq, b"{\"result\":\"ok\"}");
                tls.client_seq += 1;
                tls.server_seq += 1;
                Reply::Send(reply)
            }
        }
    }
}

/// Pops one complete request from a TCP receive buffer.
fn next_message(behavior: Behavior, buf: &mut Vec<u8>) -> Option<Vec<u8>> {
    let n = match behavior {
        Behavior::CleartextEcho | Behavior::SignedCleartext | Behavior::SessionKey => {
            buf.iter().position(|&b| b == b'\n')? + 1
        }
        Behavior::EncodedFixed => (buf.len() >= wire::ENCODED_LEN).then_some(wire::ENCODED_LEN)?,
        Behavior::Silent => (buf.len() >= wire::SILENT_LEN).then_some(wire::SILENT_LEN)?,
        Behavior::TlsLike => RecordLayer::Tls.complete_record(buf)?,
    };
    Some(buf.drain(..n).collect())
}

/// A running simulated device. Stops when dropped.
pub struct DeviceHandle {
    endpoint: Endpoint,
    profile: DeviceProfile,
    core: Arc<Mutex<Core>>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

impl DeviceHandle {
    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    fn core(&self) -> MutexGuard<'_, Core> {
        self.core.lock().expect("device state poisoned")
    }

    pub fn query_state(&self) -> DeviceState {
        self.core().state
    }

    /// Power cycle: drops connections and volatile session state and returns
    /// to REVERSE. SessionKey devices issue a new key unless configured not to.
    pub fn restart_device(&self) {
        self.core().restart();
    }

    /// Every request message the device has processed, in order.
    pub fn received(&self) -> Vec<Vec<u8>> {
        self.core().received.clone()
    }

    pub fn received_count(&self) -> usize {
        self.core().received.len()
    }

    pub(crate) fn pairing_secret(&self) -> Secret {
        self.core().secret
    }

    pub(crate) fn last_counter(&self) -> u64 {
        self.core().last_counter
    }

    /// Current session key. Test and debugging aid only.
    #[cfg(any(test, debug_assertions, feature = "inspect"))]
    pub fn session_key(&self) -> [u8; 16] {
        self.core().session_key
    }

    pub fn shutdown(mut self) {
        self.stop_worker();
    }

    fn stop_worker(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        self.stop_worker();
    }
}

impl std::fmt::Debug for DeviceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceHandle")
            .field("endpoint", &self.endpoint)
            .field("profile", &self.profile)
            .finish()
    }
}

/// Starts a device on 127.0.0.1. Initial state is REVERSE.
pub fn spawn_device(profile: DeviceProfile) -> Result<DeviceHandle, SimError> {
    spawn_device_on(profile, IpAddr::V4(Ipv4Addr::LOCALHOST))
}

pub fn spawn_device_on(profile: DeviceProfile, ip: IpAddr) -> Result<DeviceHandle, SimError> {
    let spawn_err = |source| SimError::Spawn {
        port: profile.port,
        source,
    };
    let bind = SocketAddr::new(ip, profile.port);
    let core = Arc::new(Mutex::new(Core::new(&profile)));
    let stop = Arc::new(AtomicBool::new(false));

    let (endpoint, worker) = match profile.transport {
        Transport::Tcp => {
            let listener = TcpListener::bind(bind).map_err(spawn_err)?;
            listener.set_nonblocking(true).map_err(spawn_err)?;
            let endpoint = Endpoint::from(listener.local_addr().map_err(spawn_err)?);
            let (c, s) = (Arc::clone(&core), Arc::clone(&stop));
            let w = thread::Builder::new()
                .name(format!("sim-{}-tcp", profile.behavior))
                .spawn(move || tcp_loop(listener, c, s))
                .map_err(spawn_err)?;
            (endpoint, w)
        }
        Transport::Udp => {
            let socket = UdpSocket::bind(bind).map_err(spawn_err)?;
            socket.set_read_timeout(Some(POLL)).map_err(spawn_err)?;
            let endpoint = Endpoint::from(socket.local_addr().map_err(spawn_err)?);
            let (c, s) = (Arc::clone(&core), Arc::clone(&stop));
            let w = thread::Builder::new()
                .name(format!("sim-{}-udp", profile.behavior))
                .spawn(move || udp_loop(socket, c, s))
                .map_err(spawn_err)?;
            (endpoint, w)
        }
    };

    Ok(DeviceHandle {
        endpoint,
        profile,
        core,
        stop,
        worker: Some(worker),
    })
}

fn tcp_loop(listener: TcpListener, core: Arc<Mutex<Core>>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => serve_connection(stream, &core, &stop),
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

fn serve_connection(mut stream: TcpStream, core: &Mutex<Core>, stop: &AtomicBool) {
    if stream.set_nonblocking(false).is_err()
        || stream.set_read_timeout(Some(POLL)).is_err()
        || stream.set_nodelay(true).is_err()
    {
        return;
    }
    let (behavior, generation) = {
        let c = core.lock().unwrap();
        (c.behavior, c.generation)
    };
    let mut tls = TlsSession::default();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];

    'conn: while !stop.load(Ordering::SeqCst) {
        if core.lock().unwrap().generation != generation {
            break;
        }
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
        while let Some(msg) = next_message(behavior, &mut buf) {
            let reply = {
                let mut c = core.lock().unwrap();
                if c.generation != generation {
                    break 'conn;
                }
                c.handle(&msg, RecordLayer::Tls, &mut tls)
            };
            match reply {
                Reply::Nothing => {}
                Reply::Send(bytes) => {
                    if stream.write_all(&bytes).is_err() {
                        break 'conn;
                    }
                }
                Reply::SendAndClose(bytes) => {
                    let _ = stream.write_all(&bytes);
                    break 'conn;
                }
            }
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn udp_loop(socket: UdpSocket, core: Arc<Mutex<Core>>, stop: Arc<AtomicBool>) {
    let mut buf = vec![0u8; 65536];
    while !stop.load(Ordering::SeqCst) {
        let (n, peer) = match socket.recv_from(&mut buf) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let reply = {
            let mut c = core.lock().unwrap();
            let mut session = c.dtls.remove(&peer).unwrap_or_default();
            let reply = c.handle(&buf[..n], RecordLayer::Dtls, &mut session);
            if !matches!(reply, Reply::SendAndClose(_)) {
                c.dtls.insert(peer, session);
            }
            reply
        };
        match reply {
            Reply::Nothing => {}
            Reply::Send(bytes) | Reply::SendAndClose(bytes) => {
                let _ = socket.send_to(&bytes, peer);
            }
        }
    }
}
