use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::SimError;
use crate::capture::Endpoint;

/// Datagram `request` is answered by each of `replies`, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub request: Vec<u8>,
    pub replies: Vec<Vec<u8>>,
}

impl ScriptRule {
    pub fn new(request: &[u8], replies: &[&[u8]]) -> Self {
        Self {
            request: request.to_vec(),
            replies: replies.iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// UDP responder with a fixed request-to-replies table. Unknown requests are
/// ignored.
pub struct ScriptedDevice {
    endpoint: Endpoint,
    received: Arc<Mutex<Vec<Vec<u8>>>>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

impl ScriptedDevice {
    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn received(&self) -> Vec<Vec<u8>> {
        self.received.lock().unwrap().clone()
    }
}

impl Drop for ScriptedDevice {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

pub fn spawn_scripted(rules: Vec<ScriptRule>) -> Result<ScriptedDevice, SimError> {
    let spawn_err = |source| SimError::Spawn { port: 0, source };
    let socket = UdpSocket::bind(SocketAddr::from(([127, 0, 0, 1], 0))).map_err(spawn_err)?;
    socket
        .set_read_timeout(Some(Duration::from_millis(20)))
        .map_err(spawn_err)?;
    let endpoint = Endpoint::from(socket.local_addr().map_err(spawn_err)?);
    let received = Arc::new(Mutex::new(Vec::new()));
    let stop = Arc::new(AtomicBool::new(false));

    let (log, flag) = (Arc::clone(&received), Arc::clone(&stop));
    let worker = thread::spawn(move || {
        let mut buf = vec![0u8; 65536];
        while !flag.load(Ordering::SeqCst) {
            let Ok((n, peer)) = socket.recv_from(&mut buf) else {
                continue;
            };
            let msg = &buf[..n];
            log.lock().unwrap().push(msg.to_vec());
            if let Some(rule) = rules.iter().find(|r| r.request == msg) {
                for reply in &rule.replies {
                    let _ = socket.send_to(reply, peer);
                }
            }
        }
    });

    Ok(ScriptedDevice {
        endpoint,
        received,
        stop,
        worker: Some(worker),
    })
}
