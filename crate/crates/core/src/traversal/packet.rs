use super::SessionId;

pub const MAGIC: [u8; 4] = *b"BDHP";
pub const VERSION: u8 = 0x01;
pub const PACKET_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketKind {
    Probe = 0x01,
    ProbeAck = 0x02,
    Confirm = 0x03,
}

impl PacketKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(PacketKind::Probe),
            0x02 => Some(PacketKind::ProbeAck),
            0x03 => Some(PacketKind::Confirm),
            _ => None,
        }
    }
}

/// The fixed 22-byte punch datagram:
///
/// ```text
/// 0      4   5    6            14           22
/// +------+---+----+------------+------------+
/// | BDHP | 1 |kind| session id |   nonce    |
/// +------+---+----+------------+------------+
/// ```
///
/// All integers are big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProbePacket {
    pub kind: PacketKind,
    pub session: SessionId,
    pub nonce: u64,
}

impl ProbePacket {
    pub fn new(kind: PacketKind, session: SessionId, nonce: u64) -> Self {
        Self {
            kind,
            session,
            nonce,
        }
    }

    pub fn encode(&self) -> [u8; PACKET_LEN] {
        let mut out = [0u8; PACKET_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.kind as u8;
        out[6..14].copy_from_slice(self.session.as_bytes());
        out[14..22].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }

    /// Parse a datagram; anything that is not a well-formed packet is `None`.
    pub fn decode(buf: &[u8]) -> Option<Self> {
        if buf.len() != PACKET_LEN || buf[..4] != MAGIC || buf[4] != VERSION {
            return None;
        }
        let kind = PacketKind::from_byte(buf[5])?;
        let session = SessionId::from_bytes(buf[6..14].try_into().ok()?);
        let nonce = u64::from_be_bytes(buf[14..22].try_into().ok()?);
        Some(Self {
            kind,
            session,
            nonce,
        })
    }

    /// Reply echoing this packet's nonce.
    pub fn reply(&self, kind: PacketKind) -> Self {
        Self::new(kind, self.session, self.nonce)
    }
}

/// Cheap test used by demultiplexers before a full decode.
pub fn looks_like_probe(buf: &[u8]) -> bool {
    buf.len() == PACKET_LEN && buf[..4] == MAGIC
}
