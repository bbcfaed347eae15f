use serde::{Deserialize, Serialize};

use super::{classify_direction, Direction, Endpoint, PacketRecord, SessionConfig, Transport};

/// Consecutive app-to-device requests followed by the device's consecutive
/// responses. The unit of replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub requests: Vec<PacketRecord>,
    pub responses: Vec<PacketRecord>,
}

impl Flow {
    pub fn transport(&self) -> Transport {
        self.requests
            .first()
            .map(|r| r.transport)
            .unwrap_or(Transport::Tcp)
    }

    /// Destination the requests were originally sent to.
    pub fn device(&self) -> Option<Endpoint> {
        self.requests.first().map(|r| r.dst)
    }
}

/// Cuts a timestamp-ordered record stream into flows.
///
/// A flow starts at the first request and at every request that follows a
/// response. Unrelated records and responses seen before any request are
/// dropped.
pub fn segment_flows(records: &[PacketRecord], config: &SessionConfig) -> Vec<Flow> {
    let mut flows = Vec::new();
    let mut current: Option<Flow> = None;

    for record in records {
        match classify_direction(record, config) {
            Direction::Request => {
                if current.as_ref().is_some_and(|f| !f.responses.is_empty()) {
                    flows.extend(current.take());
                }
                current
                    .get_or_insert_with(|| Flow {
                        requests: Vec::new(),
                        responses: Vec::new(),
                    })
                    .requests
                    .push(record.clone());
            }
            Direction::Response => {
                if let Some(flow) = current.as_mut() {
                    flow.responses.push(record.clone());
                }
            }
            Direction::Unrelated => {}
        }
    }
    flows.extend(current);
    flows
}

/// Reports whether payloads from distinct TCP connections of the pair are
/// interleaved in time. Segmentation merges all connections into one stream,
/// so such captures can produce flows mixing unrelated exchanges.
pub fn connections_interleave(records: &[PacketRecord], config: &SessionConfig) -> bool {
    let mut order: Vec<(Endpoint, Endpoint)> = Vec::new();
    let mut last: Option<(Endpoint, Endpoint)> = None;
    for r in records.iter().filter(|r| r.transport == Transport::Tcp) {
        let key = match classify_direction(r, config) {
            Direction::Request => (r.src, r.dst),
            Direction::Response => (r.dst, r.src),
            Direction::Unrelated => continue,
        };
        if last == Some(key) {
            continue;
        }
        if order.contains(&key) {
            return true;
        }
        order.push(key);
        last = Some(key);
    }
    false
}
