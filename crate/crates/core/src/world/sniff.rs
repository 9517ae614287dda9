//! Passive observation of everything that crossed the simulated wire.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::netsim::Captured;
use crate::rendezvous::{decode_line, ControlMessage};

/// Every byte string an on-path observer could read: raw datagrams,
/// control lines, and the decoded payload of relayed frames.
pub fn observable_payloads(captured: &[Captured]) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(captured.len());
    for c in captured {
        out.push(c.payload.clone());
        if !c.reliable {
            continue;
        }
        let relayed = std::str::from_utf8(&c.payload).ok().and_then(|l| decode_line(l).ok());
        if let Some(ControlMessage::RelayData { payload_b64, .. }) = relayed {
            if let Ok(b) = B64.decode(payload_b64) {
                out.push(b);
            }
        }
    }
    out
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Union-find over node indices.
#[derive(Debug, Clone)]
pub struct Components {
    parent: Vec<usize>,
}

impl Components {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.parent[ra] = rb;
    }

    pub fn count(&mut self) -> usize {
        (0..self.parent.len()).filter(|&i| self.find(i) == i).count()
    }
}
