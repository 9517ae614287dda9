//! Application messages carried inside link frames during realization.

use std::net::Ipv4Addr;

/// Largest bulk chunk; a sealed chunk stays under 1 KiB.
pub const BULK_CHUNK: usize = 960;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppMessage {
    Marker(Vec<u8>),
    MarkerAck,
    Ping { src: Ipv4Addr, dst: Ipv4Addr, seq: u32, ttl: u8 },
    Pong { src: Ipv4Addr, dst: Ipv4Addr, seq: u32, ttl: u8 },
    BulkChunk { index: u16, total: u16, data: Vec<u8> },
    BulkEnd { len: u32, sha256: [u8; 32] },
}

impl AppMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            AppMessage::Marker(text) => {
                out.push(0x01);
                out.extend_from_slice(text);
            }
            AppMessage::MarkerAck => out.push(0x06),
            AppMessage::Ping { src, dst, seq, ttl } | AppMessage::Pong { src, dst, seq, ttl } => {
                out.push(if matches!(self, AppMessage::Ping { .. }) { 0x02 } else { 0x03 });
                out.extend_from_slice(&src.octets());
                out.extend_from_slice(&dst.octets());
                out.extend_from_slice(&seq.to_be_bytes());
                out.push(*ttl);
            }
            AppMessage::BulkChunk { index, total, data } => {
                out.push(0x04);
                out.extend_from_slice(&index.to_be_bytes());
                out.extend_from_slice(&total.to_be_bytes());
                out.extend_from_slice(data);
            }
            AppMessage::BulkEnd { len, sha256 } => {
                out.push(0x05);
                out.extend_from_slice(&len.to_be_bytes());
                out.extend_from_slice(sha256);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        let (&kind, rest) = buf.split_first()?;
        let ip = |b: &[u8]| Ipv4Addr::new(b[0], b[1], b[2], b[3]);
        match kind {
            0x01 => Some(AppMessage::Marker(rest.to_vec())),
            0x06 if rest.is_empty() => Some(AppMessage::MarkerAck),
            0x02 | 0x03 if rest.len() == 13 => {
                let (src, dst) = (ip(&rest[..4]), ip(&rest[4..8]));
                let seq = u32::from_be_bytes(rest[8..12].try_into().ok()?);
                let ttl = rest[12];
                Some(if kind == 0x02 {
                    AppMessage::Ping { src, dst, seq, ttl }
                } else {
                    AppMessage::Pong { src, dst, seq, ttl }
                })
            }
            0x04 if rest.len() >= 4 => Some(AppMessage::BulkChunk {
                index: u16::from_be_bytes([rest[0], rest[1]]),
                total: u16::from_be_bytes([rest[2], rest[3]]),
                data: rest[4..].to_vec(),
            }),
            0x05 if rest.len() == 36 => Some(AppMessage::BulkEnd {
                len: u32::from_be_bytes(rest[..4].try_into().ok()?),
                sha256: rest[4..].try_into().ok()?,
            }),
            _ => None,
        }
    }
}

/// Deterministic filler for the bulk transfer.
pub fn bulk_payload(len: usize, seed: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut v = vec![0u8; len];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}
