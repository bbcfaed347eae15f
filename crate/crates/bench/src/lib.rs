//! Synthetic inputs shared by the benchmarks.

use std::net::{IpAddr, Ipv4Addr};

use replayprobe_core::capture::{
    Endpoint, PcapWriter, SegmentBuilder, SessionConfig, TCP_ACK, TCP_PSH,
};
use replayprobe_core::detector::{featurize, FeatureVector};

pub fn session() -> SessionConfig {
    let app = Endpoint::new(IpAddr::V4(Ipv4Addr::new(192, 168, 1, 20)), 0);
    let device = Endpoint::new(IpAddr::V4(Ipv4Addr::new(192, 168, 1, 50)), 6668);
    SessionConfig::new(app, device).expect("distinct endpoints")
}

/// JSON-ish device reply of roughly `len` bytes.
pub fn reply(i: usize, len: usize) -> Vec<u8> {
    let mut s = format!("{{\"id\":{i},\"result\":[\"ok\"],\"pad\":\"");
    while s.len() + 2 < len {
        s.push(char::from(b'a' + (s.len() % 26) as u8));
    }
    s.push_str("\"}");
    s.into_bytes()
}

pub fn training_set(n: usize) -> Vec<FeatureVector> {
    (0..n).map(|i| featurize(&reply(i, 64 + i % 7))).collect()
}

/// A TCP capture of `exchanges` request/response pairs on one connection.
pub fn capture(exchanges: usize) -> Vec<u8> {
    let cfg = session();
    let app = Endpoint::new(cfg.app.addr, 50_000);
    let mut w = PcapWriter::new(Vec::new()).expect("in memory");
    let (mut seq_a, mut seq_d) = (1u32, 1u32);
    for i in 0..exchanges {
        let req = format!("{{\"id\":{i},\"method\":\"set_power\",\"params\":[\"on\"]}}\r\n");
        let resp = reply(i, 80);
        let ts = i as u64 * 2_000;
        let f = SegmentBuilder::tcp(
            app,
            cfg.device,
            seq_a,
            seq_d,
            TCP_PSH | TCP_ACK,
            req.as_bytes(),
        );
        w.write_frame(ts, &f).expect("in memory");
        seq_a = seq_a.wrapping_add(req.len() as u32);
        let f = SegmentBuilder::tcp(cfg.device, app, seq_d, seq_a, TCP_PSH | TCP_ACK, &resp);
        w.write_frame(ts + 1_000, &f).expect("in memory");
        seq_d = seq_d.wrapping_add(resp.len() as u32);
    }
    w.into_inner()
}
