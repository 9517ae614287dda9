use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use sha2::{Digest, Sha256};

use super::{plain, SecureError};
use crate::traversal::SessionId;

/// Channel id plus counter.
pub const FRAME_HEADER: usize = 16;
pub const TAG_LEN: usize = 16;
pub const REPLAY_WINDOW: u64 = 64;

/// `channel id (8) | counter (8, big-endian) | ciphertext + tag`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecureFrame {
    pub channel: [u8; 8],
    pub counter: u64,
    pub body: Vec<u8>,
}

impl SecureFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER + self.body.len());
        out.extend_from_slice(&self.channel);
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, SecureError> {
        if buf.len() < FRAME_HEADER + TAG_LEN {
            return Err(SecureError::Malformed);
        }
        Ok(Self {
            channel: buf[..8].try_into().expect("8 bytes"),
            counter: u64::from_be_bytes(buf[8..16].try_into().expect("8 bytes")),
            body: buf[FRAME_HEADER..].to_vec(),
        })
    }

    fn aad(&self) -> [u8; FRAME_HEADER] {
        let mut aad = [0u8; FRAME_HEADER];
        aad[..8].copy_from_slice(&self.channel);
        aad[8..].copy_from_slice(&self.counter.to_be_bytes());
        aad
    }
}

fn nonce(counter: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

/// Sliding window over the highest counter seen.
#[derive(Debug, Clone, Default)]
struct ReplayWindow {
    top: Option<u64>,
    /// Bit i set means `top - i` was accepted.
    bits: u64,
}

impl ReplayWindow {
    fn check(&self, c: u64) -> Result<(), SecureError> {
        let Some(top) = self.top else { return Ok(()) };
        if c > top {
            return Ok(());
        }
        let age = top - c;
        if age >= REPLAY_WINDOW {
            return Err(SecureError::WindowOverflow);
        }
        if self.bits & (1 << age) != 0 {
            return Err(SecureError::Replay);
        }
        Ok(())
    }

    fn accept(&mut self, c: u64) {
        match self.top {
            None => {
                self.top = Some(c);
                self.bits = 1;
            }
            Some(top) if c > top => {
                let shift = c - top;
                self.bits = if shift >= REPLAY_WINDOW { 0 } else { self.bits << shift };
                self.bits |= 1;
                self.top = Some(c);
            }
            Some(top) => self.bits |= 1 << (top - c),
        }
    }
}

/// Directional keys and counters for one link.
#[derive(Clone)]
pub struct SessionKeys {
    channel: [u8; 8],
    send_key: [u8; 32],
    recv_key: [u8; 32],
    send: ChaCha20Poly1305,
    recv: ChaCha20Poly1305,
    next_counter: u64,
    window: ReplayWindow,
    rejected: u64,
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionKeys")
            .field("channel", &hex::encode(self.channel))
            .field("next_counter", &self.next_counter)
            .field("rejected", &self.rejected)
            .finish_non_exhaustive()
    }
}

impl SessionKeys {
    pub(crate) fn new(session: SessionId, send_key: [u8; 32], recv_key: [u8; 32]) -> Self {
        Self {
            channel: *session.as_bytes(),
            send: ChaCha20Poly1305::new(Key::from_slice(&send_key)),
            recv: ChaCha20Poly1305::new(Key::from_slice(&recv_key)),
            send_key,
            recv_key,
            next_counter: 0,
            window: ReplayWindow::default(),
            rejected: 0,
        }
    }

    /// Short digest of the sending key, for comparing two sides in tests.
    pub fn send_fingerprint(&self) -> [u8; 8] {
        fingerprint(&self.send_key)
    }

    pub fn recv_fingerprint(&self) -> [u8; 8] {
        fingerprint(&self.recv_key)
    }

    /// Frames discarded by [`open`](Self::open).
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn frames_sent(&self) -> u64 {
        self.next_counter
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<SecureFrame, SecureError> {
        let counter = self.next_counter;
        self.next_counter = counter.checked_add(1).ok_or(SecureError::CounterExhausted)?;
        let mut frame = SecureFrame {
            channel: self.channel,
            counter,
            body: Vec::new(),
        };
        frame.body = self
            .send
            .encrypt(
                Nonce::from_slice(&nonce(counter)),
                Payload {
                    msg: plaintext,
                    aad: &frame.aad(),
                },
            )
            .expect("chacha20poly1305 encryption is infallible for in-range lengths");
        Ok(frame)
    }

    pub fn open(&mut self, wire: &[u8]) -> Result<Vec<u8>, SecureError> {
        let r = self.open_inner(wire);
        if r.is_err() {
            self.rejected += 1;
        }
        r
    }

    fn open_inner(&mut self, wire: &[u8]) -> Result<Vec<u8>, SecureError> {
        let frame = SecureFrame::decode(wire)?;
        if frame.channel != self.channel {
            return Err(SecureError::WrongChannel(hex::encode(frame.channel)));
        }
        self.window.check(frame.counter)?;
        let pt = self
            .recv
            .decrypt(
                Nonce::from_slice(&nonce(frame.counter)),
                Payload {
                    msg: &frame.body,
                    aad: &frame.aad(),
                },
            )
            .map_err(|_| SecureError::AuthFailure)?;
        self.window.accept(frame.counter);
        Ok(pt)
    }
}

fn fingerprint(key: &[u8; 32]) -> [u8; 8] {
    Sha256::digest(key)[..8].try_into().expect("8 bytes")
}

/// How application bytes are framed on one overlay link.
#[derive(Debug, Clone)]
pub enum LinkCodec {
    Plain,
    Secure(Box<SessionKeys>),
}

impl LinkCodec {
    pub fn is_encrypted(&self) -> bool {
        matches!(self, LinkCodec::Secure(_))
    }

    pub fn seal(&mut self, payload: &[u8]) -> Result<Vec<u8>, SecureError> {
        match self {
            LinkCodec::Plain => plain::encode(payload),
            LinkCodec::Secure(k) => Ok(k.seal(payload)?.encode()),
        }
    }

    pub fn open(&mut self, wire: &[u8]) -> Result<Vec<u8>, SecureError> {
        match self {
            LinkCodec::Plain => plain::decode(wire).map(<[u8]>::to_vec),
            LinkCodec::Secure(k) => k.open(wire),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair() -> (SessionKeys, SessionKeys) {
        let sid = SessionId::from_bytes([5; 8]);
        (SessionKeys::new(sid, [1; 32], [2; 32]), SessionKeys::new(sid, [2; 32], [1; 32]))
    }

    #[test]
    fn round_trip_edge_sizes() {
        let (mut a, mut b) = pair();
        for len in [0usize, 1, 1200] {
            let pt = vec![0xAB; len];
            let wire = a.seal(&pt).unwrap().encode();
            assert_eq!(wire.len(), FRAME_HEADER + len + TAG_LEN);
            assert_eq!(b.open(&wire).unwrap(), pt);
        }
    }

    #[test]
    fn bit_flips_fail_auth() {
        let (mut a, mut b) = pair();
        let wire = a.seal(b"attack at dawn").unwrap().encode();
        for byte in 8..wire.len() {
            let mut bad = wire.clone();
            bad[byte] ^= 0x01;
            let e = b.open(&bad).unwrap_err();
            assert!(matches!(e, SecureError::AuthFailure | SecureError::WindowOverflow), "{byte}: {e:?}");
        }
        assert_eq!(b.open(&wire).unwrap(), b"attack at dawn");
        assert_eq!(b.rejected(), (wire.len() - 8) as u64);
        let mut bad = wire.clone();
        bad[0] ^= 1;
        assert!(matches!(b.open(&bad), Err(SecureError::WrongChannel(_))));
    }

    #[test]
    fn replay_and_window() {
        let (mut a, mut b) = pair();
        let frames: Vec<_> = (0..100).map(|i| a.seal(&[i as u8]).unwrap().encode()).collect();
        assert_eq!(b.open(&frames[5]).unwrap(), vec![5]);
        assert_eq!(b.open(&frames[5]), Err(SecureError::Replay));
        // Out of order inside the window is fine.
        assert_eq!(b.open(&frames[3]).unwrap(), vec![3]);
        assert_eq!(b.open(&frames[99]).unwrap(), vec![99]);
        assert_eq!(b.open(&frames[36]).unwrap(), vec![36]);
        assert_eq!(b.open(&frames[35]), Err(SecureError::WindowOverflow));
        assert_eq!(b.open(&frames[36]), Err(SecureError::Replay));
    }

    #[test]
    fn directions_are_independent() {
        let (mut a, _) = pair();
        let wire = a.seal(b"x").unwrap().encode();
        // The sender cannot open its own frame: it holds the other key.
        assert_eq!(a.open(&wire), Err(SecureError::AuthFailure));
    }

    proptest! {
        #[test]
        fn counters_never_repeat(n in 1usize..300) {
            let (mut a, mut b) = pair();
            let mut seen = std::collections::HashSet::new();
            for i in 0..n {
                let f = a.seal(&i.to_be_bytes()).unwrap();
                prop_assert!(seen.insert(f.counter));
                prop_assert_eq!(b.open(&f.encode()).unwrap(), i.to_be_bytes().to_vec());
            }
        }

        #[test]
        fn shuffled_delivery_within_window(order in Just((0u64..64).collect::<Vec<_>>()).prop_shuffle()) {
            let (mut a, mut b) = pair();
            let frames: Vec<_> = (0..64).map(|i| a.seal(&[i as u8]).unwrap().encode()).collect();
            for i in &order {
                prop_assert_eq!(b.open(&frames[*i as usize]).unwrap(), vec![*i as u8]);
            }
            for i in order {
                prop_assert_eq!(b.open(&frames[i as usize]), Err(SecureError::Replay));
            }
        }

        #[test]
        fn garbage_never_panics(buf in proptest::collection::vec(any::<u8>(), 0..80)) {
            let (_, mut b) = pair();
            prop_assert!(b.open(&buf).is_err());
        }
    }
}
