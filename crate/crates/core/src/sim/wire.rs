//! Message formats of the simulated device families.
//!
//! Both the device and the companion build and parse messages through these
//! helpers, so the two sides cannot drift apart.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use sha2::{Digest, Sha256};

use super::DeviceState;

pub type Secret = [u8; 16];

pub fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

/// XOR with a SHA-256 counter-mode pad. Encrypts and decrypts.
pub fn keystream_xor(key: &[u8], data: &[u8]) -> Vec<u8> {
    data.chunks(32)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let pad = digest(&[key, &(i as u32).to_be_bytes()]);
            chunk
                .iter()
                .zip(pad)
                .map(|(b, p)| b ^ p)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn on(state: DeviceState) -> bool {
    state == DeviceState::Obverse
}

// CleartextEcho: one JSON object per "\r\n"-terminated line.

pub fn echo_request(id: u32, target: DeviceState) -> Vec<u8> {
    let power = if on(target) { "on" } else { "off" };
    format!("{{\"id\":{id},\"method\":\"set_power\",\"params\":[\"{power}\",\"smooth\",500]}}\r\n")
        .into_bytes()
}

pub fn echo_reply(id: u64, state: DeviceState) -> Vec<u8> {
    let (power, bright) = if on(state) { ("on", 100) } else { ("off", 0) };
    format!(
        "{{\"id\":{id},\"result\":[\"ok\"]}}\r\n\
         {{\"method\":\"props\",\"params\":{{\"power\":\"{power}\",\"bright\":{bright}}}}}\r\n"
    )
    .into_bytes()
}

pub fn echo_error(id: u64) -> Vec<u8> {
    format!("{{\"id\":{id},\"error\":{{\"code\":-1,\"message\":\"unsupported request\"}}}}\r\n")
        .into_bytes()
}

/// Returns (id, requested state) for a well-formed set_power request.
pub fn parse_echo_request(msg: &[u8]) -> (u64, Option<DeviceState>) {
    let Ok(v) = serde_json::from_slice::<serde_json::Value>(msg) else {
        return (0, None);
    };
    let id = v.get("id").and_then(|i| i.as_u64()).unwrap_or(0);
    if v.get("method").and_then(|m| m.as_str()) != Some("set_power") {
        return (id, None);
    }
    let state = match v.pointer("/params/0").and_then(|p| p.as_str()) {
        Some("on") => Some(DeviceState::Obverse),
        Some("off") => Some(DeviceState::Reverse),
        _ => None,
    };
    (id, state)
}

// SignedCleartext: JSON with a header signature over messageId, secret and timestamp.

pub const SIGNED_NAMESPACE: &str = "Appliance.Control.ToggleX";

pub fn signed_sign(message_id: &str, secret: &Secret, timestamp: u64) -> String {
    let d = digest(&[
        message_id.as_bytes(),
        hex::encode(secret).as_bytes(),
        timestamp.to_string().as_bytes(),
    ]);
    hex::encode(&d[..16])
}

pub fn signed_request(
    message_id: &str,
    timestamp: u64,
    secret: &Secret,
    target: DeviceState,
) -> Vec<u8> {
    let sign = signed_sign(message_id, secret, timestamp);
    let onoff = u8::from(on(target));
    format!(
        "{{\"header\":{{\"messageId\":\"{message_id}\",\"namespace\":\"{SIGNED_NAMESPACE}\",\
         \"method\":\"SET\",\"payloadVersion\":1,\"from\":\"/app/companion\",\
         \"timestamp\":{timestamp},\"sign\":\"{sign}\"}},\
         \"payload\":{{\"togglex\":{{\"channel\":0,\"onoff\":{onoff}}}}}}}\n"
    )
    .into_bytes()
}

pub fn signed_ack(device_ts: u64, secret: &Secret, state: DeviceState) -> Vec<u8> {
    let (onoff, word, bright) = if on(state) {
        (1, "on", 100)
    } else {
        (0, "off", 0)
    };
    let sign = hex::encode(&digest(&[b"ack", secret, &[onoff]])[..16]);
    format!(
        "{{\"header\":{{\"namespace\":\"{SIGNED_NAMESPACE}\",\"method\":\"SETACK\",\
         \"payloadVersion\":1,\"from\":\"/appliance/publish\",\"timestamp\":{device_ts},\
         \"sign\":\"{sign}\"}},\"payload\":{{\"togglex\":{{\"channel\":0,\"onoff\":{onoff},\
         \"state\":\"{word}\",\"bright\":{bright}}}}}}}\n"
    )
    .into_bytes()
}

pub fn signed_error(device_ts: u64) -> Vec<u8> {
    format!(
        "{{\"header\":{{\"method\":\"ERROR\",\"timestamp\":{device_ts}}},\
         \"payload\":{{\"error\":{{\"code\":5001,\"detail\":\"sign error\"}}}}}}\n"
    )
    .into_bytes()
}

/// The requested state when the signature verifies.
pub fn verify_signed_request(msg: &[u8], secret: &Secret) -> Option<DeviceState> {
    let v: serde_json::Value = serde_json::from_slice(msg).ok()?;
    let header = v.get("header")?;
    if header.get("namespace")?.as_str()? != SIGNED_NAMESPACE
        || header.get("method")?.as_str()? != "SET"
    {
        return None;
    }
    let id = header.get("messageId")?.as_str()?;
    let ts = header.get("timestamp")?.as_u64()?;
    if header.get("sign")?.as_str()? != signed_sign(id, secret, ts) {
        return None;
    }
    match v.pointer("/payload/togglex/onoff")?.as_u64()? {
        1 => Some(DeviceState::Obverse),
        0 => Some(DeviceState::Reverse),
        _ => None,
    }
}

// EncodedFixed: 24-byte frames that never change for a given state.

pub const ENCODED_LEN: usize = 24;

fn encoded_frame(kind: u8, state: DeviceState, secret: &Secret) -> Vec<u8> {
    let tail = digest(&[b"encoded", &[kind], secret]);
    let mut f = vec![0xa5, 0x5a, kind, u8::from(on(state))];
    f.extend_from_slice(&tail[..ENCODED_LEN - 4]);
    f
}

pub fn encoded_request(secret: &Secret, target: DeviceState) -> Vec<u8> {
    encoded_frame(0x01, target, secret)
}

pub fn encoded_ack(secret: &Secret, state: DeviceState) -> Vec<u8> {
    encoded_frame(0x81, state, secret)
}

pub fn encoded_nak() -> Vec<u8> {
    let mut f = vec![0xa5, 0x5a, 0xee, 0xff];
    f.resize(ENCODED_LEN, 0);
    f
}

pub fn parse_encoded_request(msg: &[u8], secret: &Secret) -> Option<DeviceState> {
    [DeviceState::Obverse, DeviceState::Reverse]
        .into_iter()
        .find(|&s| msg == encoded_request(secret, s).as_slice())
}

// SessionKey: key handed out at pairing, commands encrypted under it.

pub fn handshake_request() -> Vec<u8> {
    b"{\"method\":\"handshake\",\"params\":{\"client\":\"companion\"}}\n".to_vec()
}

fn key_wrap_pad(secret: &Secret) -> [u8; 32] {
    digest(&[b"wrap", secret])
}

pub fn handshake_reply(secret: &Secret, key: &[u8; 16]) -> Vec<u8> {
    let pad = key_wrap_pad(secret);
    let wrapped: Vec<u8> = key.iter().zip(pad).map(|(k, p)| k ^ p).collect();
    format!(
        "{{\"error_code\":0,\"result\":{{\"key\":\"{}\"}}}}\n",
        B64.encode(wrapped)
    )
    .into_bytes()
}

pub fn parse_handshake_reply(msg: &[u8], secret: &Secret) -> Option<[u8; 16]> {
    let v: serde_json::Value = serde_json::from_slice(msg).ok()?;
    let wrapped = B64.decode(v.pointer("/result/key")?.as_str()?).ok()?;
    if wrapped.len() != 16 {
        return None;
    }
    let pad = key_wrap_pad(secret);
    let mut key = [0u8; 16];
    for (i, b) in wrapped.iter().enumerate() {
        key[i] = b ^ pad[i];
    }
    Some(key)
}

fn session_plain_command(target: DeviceState) -> String {
    format!(
        "{{\"method\":\"set_device_info\",\"params\":{{\"device_on\":{}}}}}",
        on(target)
    )
}

pub fn session_command(key: &[u8; 16], target: DeviceState) -> Vec<u8> {
    let sealed = B64.encode(keystream_xor(key, session_plain_command(target).as_bytes()));
    format!("{{\"method\":\"securePassthrough\",\"params\":{{\"request\":\"{sealed}\"}}}}\n")
        .into_bytes()
}

pub fn session_ack(key: &[u8; 16], state: DeviceState) -> Vec<u8> {
    let inner = format!(
        "{{\"error_code\":0,\"result\":{{\"device_on\":{}}}}}",
        on(state)
    );
    let sealed = B64.encode(keystream_xor(key, inner.as_bytes()));
    format!("{{\"error_code\":0,\"result\":{{\"response\":\"{sealed}\"}}}}\n").into_bytes()
}

pub fn session_error() -> Vec<u8> {
    b"{\"error_code\":-1012,\"msg\":\"invalid request\"}\n".to_vec()
}

pub enum SessionMessage {
    Handshake,
    Command(Option<DeviceState>),
    Unknown,
}

/// Decrypts passthrough commands with `key`; a wrong key yields `Command(None)`.
pub fn parse_session_message(msg: &[u8], key: &[u8; 16]) -> SessionMessage {
    let Ok(v) = serde_json::from_slice::<serde_json::Value>(msg) else {
        return SessionMessage::Unknown;
    };
    match v.get("method").and_then(|m| m.as_str()) {
        Some("handshake") => SessionMessage::Handshake,
        Some("securePassthrough") => {
            let state = v
                .pointer("/params/request")
                .and_then(|r| r.as_str())
                .and_then(|r| B64.decode(r).ok())
                .and_then(|sealed| {
                    let plain = keystream_xor(key, &sealed);
                    let cmd: serde_json::Value = serde_json::from_slice(&plain).ok()?;
                    if cmd.get("method")?.as_str()? != "set_device_info" {
                        return None;
                    }
                    match cmd.pointer("/params/device_on")?.as_bool()? {
                        true => Some(DeviceState::Obverse),
                        false => Some(DeviceState::Reverse),
                    }
                });
            SessionMessage::Command(state)
        }
        _ => SessionMessage::Unknown,
    }
}

pub fn is_session_ack(msg: &[u8]) -> bool {
    msg.starts_with(b"{\"error_code\":0,")
}

// TlsLike: TLS 1.2 style records over TCP, DTLS 1.2 records over UDP.

pub const CT_ALERT: u8 = 0x15;
pub const CT_HANDSHAKE: u8 = 0x16;
pub const CT_APPDATA: u8 = 0x17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordLayer {
    Tls,
    Dtls,
}

impl RecordLayer {
    pub fn header_len(self) -> usize {
        match self {
            RecordLayer::Tls => 5,
            RecordLayer::Dtls => 13,
        }
    }

    pub fn record(self, content_type: u8, epoch: u16, seq: u64, body: &[u8]) -> Vec<u8> {
        let mut r = vec![content_type];
        match self {
            RecordLayer::Tls => {
                let minor = if content_type == CT_HANDSHAKE && seq == 0 {
                    0x01
                } else {
                    0x03
                };
                r.extend_from_slice(&[0x03, minor]);
            }
            RecordLayer::Dtls => {
                r.extend_from_slice(&[0xfe, 0xfd]);
                r.extend_from_slice(&epoch.to_be_bytes());
                r.extend_from_slice(&seq.to_be_bytes()[2..]);
            }
        }
        r.extend_from_slice(&(body.len() as u16).to_be_bytes());
        r.extend_from_slice(body);
        r
    }

    /// Length of the first complete record in `buf`.
    pub fn complete_record(self, buf: &[u8]) -> Option<usize> {
        let h = self.header_len();
        if buf.len() < h {
            return None;
        }
        let len = u16::from_be_bytes([buf[h - 2], buf[h - 1]]) as usize;
        (buf.len() >= h + len).then_some(h + len)
    }

    pub fn split(self, record: &[u8]) -> Option<(u8, &[u8])> {
        let n = self.complete_record(record)?;
        Some((record[0], &record[self.header_len()..n]))
    }

    fn hello(self, msg_type: u8, random: &[u8; 32]) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            RecordLayer::Tls => body.extend_from_slice(&[0x03, 0x03]),
            RecordLayer::Dtls => body.extend_from_slice(&[0xfe, 0xfd]),
        }
        body.extend_from_slice(random);
        body.push(0);
        if self == RecordLayer::Dtls && msg_type == 1 {
            body.push(0);
        }
        if msg_type == 1 {
            body.extend_from_slice(&[0x00, 0x02, 0x13, 0x01, 0x01, 0x00]);
        } else {
            body.extend_from_slice(&[0x13, 0x01, 0x00]);
        }
        let len = (body.len() as u32).to_be_bytes();
        let mut hs = vec![msg_type, len[1], len[2], len[3]];
        if self == RecordLayer::Dtls {
            hs.extend_from_slice(&[0, 0, 0, 0, 0, len[1], len[2], len[3]]);
        }
        hs.extend_from_slice(&body);
        hs
    }

    pub fn client_hello(self, random: &[u8; 32]) -> Vec<u8> {
        self.record(CT_HANDSHAKE, 0, 0, &self.hello(1, random))
    }

    pub fn server_hello(self, random: &[u8; 32]) -> Vec<u8> {
        self.record(CT_HANDSHAKE, 0, 1, &self.hello(2, random))
    }

    /// Random from a hello record of the given message type.
    pub fn hello_random(self, record: &[u8], msg_type: u8) -> Option<[u8; 32]> {
        let (ct, body) = self.split(record)?;
        let hs_header = match self {
            RecordLayer::Tls => 4,
            RecordLayer::Dtls => 12,
        };
        if ct != CT_HANDSHAKE || body.first() != Some(&msg_type) || body.len() < hs_header + 34 {
            return None;
        }
        let mut r = [0u8; 32];
        r.copy_from_slice(&body[hs_header + 2..hs_header + 34]);
        Some(r)
    }

    pub fn alert(self) -> Vec<u8> {
        self.record(CT_ALERT, 0, 2, &[2, 20])
    }

    pub fn app_data(self, keys: &TlsKeys, seq: u64, plain: &[u8]) -> Vec<u8> {
        let sealed = keystream_xor(&keys.enc, plain);
        let tag = digest(&[b"tag", &keys.mac, &seq.to_be_bytes(), &sealed]);
        let mut body = sealed;
        body.extend_from_slice(&tag[..16]);
        self.record(CT_APPDATA, 1, seq, &body)
    }

    /// Verifies and decrypts an application-data record.
    pub fn open_app_data(self, keys: &TlsKeys, seq: u64, record: &[u8]) -> Option<Vec<u8>> {
        let (ct, body) = self.split(record)?;
        if ct != CT_APPDATA || body.len() < 16 {
            return None;
        }
        let (sealed, tag) = body.split_at(body.len() - 16);
        let expected = digest(&[b"tag", &keys.mac, &seq.to_be_bytes(), sealed]);
        (tag == &expected[..16]).then(|| keystream_xor(&keys.enc, sealed))
    }
}

/// Per-session keys from both hello randoms and the pairing secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlsKeys {
    enc: [u8; 32],
    mac: [u8; 32],
}

impl TlsKeys {
    pub fn derive(client: &[u8; 32], server: &[u8; 32], secret: &Secret) -> Self {
        Self {
            enc: digest(&[b"enc", client, server, secret]),
            mac: digest(&[b"mac", client, server, secret]),
        }
    }
}

pub fn tls_command(target: DeviceState) -> Vec<u8> {
    format!(
        "{{\"power\":\"{}\"}}",
        if on(target) { "on" } else { "off" }
    )
    .into_bytes()
}

pub fn parse_tls_command(plain: &[u8]) -> Option<DeviceState> {
    let v: serde_json::Value = serde_json::from_slice(plain).ok()?;
    match v.get("power")?.as_str()? {
        "on" => Some(DeviceState::Obverse),
        "off" => Some(DeviceState::Reverse),
        _ => None,
    }
}

// Silent: authenticated, counter-protected frames that are never answered.

pub const SILENT_LEN: usize = 29;

pub fn silent_frame(secret: &Secret, counter: u64, target: DeviceState) -> Vec<u8> {
    let mut f = b"SLNT".to_vec();
    f.extend_from_slice(&counter.to_be_bytes());
    f.push(u8::from(on(target)));
    let mac = digest(&[secret, &f[4..]]);
    f.extend_from_slice(&mac[..16]);
    f
}

/// (counter, state) for a frame whose MAC verifies.
pub fn parse_silent_frame(msg: &[u8], secret: &Secret) -> Option<(u64, DeviceState)> {
    if msg.len() != SILENT_LEN || &msg[..4] != b"SLNT" {
        return None;
    }
    let mac = digest(&[secret, &msg[4..13]]);
    if msg[13..] != mac[..16] {
        return None;
    }
    let counter = u64::from_be_bytes(msg[4..12].try_into().ok()?);
    let state = match msg[12] {
        1 => DeviceState::Obverse,
        0 => DeviceState::Reverse,
        _ => return None,
    };
    Some((counter, state))
}
