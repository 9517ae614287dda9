use ed25519_dalek::{Signature, Signer};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{EphemeralSecret, PublicKey};

use super::frame::SessionKeys;
use super::{HandshakeFailure, IdentityKey, IdentityPublic, SecureError};
use crate::traversal::SessionId;

pub const HANDSHAKE_MAGIC: [u8; 4] = *b"BDHS";
const VERSION: u8 = 0x01;
pub const SUITE_AEAD_CHACHA20POLY1305: u8 = 0x01;
pub const SUITE_KX_X25519: u8 = 0x01;

const HEADER: usize = 8;
const HELLO_LEN: usize = HEADER + 8 + 32 + 32;
const REPLY_LEN: usize = HELLO_LEN + 64;
const FINISH_LEN: usize = HEADER + 8 + 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum HandshakeKind {
    Hello = 0x01,
    Reply = 0x02,
    Finish = 0x03,
}

impl HandshakeKind {
    /// Identify a handshake message without validating it further.
    pub fn peek(buf: &[u8]) -> Option<Self> {
        if buf.len() < HEADER || buf[..4] != HANDSHAKE_MAGIC {
            return None;
        }
        match buf[5] {
            0x01 => Some(HandshakeKind::Hello),
            0x02 => Some(HandshakeKind::Reply),
            0x03 => Some(HandshakeKind::Finish),
            _ => None,
        }
    }
}

fn fail(f: HandshakeFailure) -> SecureError {
    SecureError::HandshakeFailed(f)
}

fn header(kind: HandshakeKind) -> [u8; HEADER] {
    let m = HANDSHAKE_MAGIC;
    [m[0], m[1], m[2], m[3], VERSION, kind as u8, SUITE_AEAD_CHACHA20POLY1305, SUITE_KX_X25519]
}

/// Check framing and session binding; returns the body after the session id.
fn parse<'a>(buf: &'a [u8], kind: HandshakeKind, len: usize, sid: SessionId) -> Result<&'a [u8], SecureError> {
    if HandshakeKind::peek(buf) != Some(kind) || buf.len() != len {
        return Err(fail(HandshakeFailure::Malformed));
    }
    if buf[4] != VERSION || buf[6] != SUITE_AEAD_CHACHA20POLY1305 || buf[7] != SUITE_KX_X25519 {
        return Err(fail(HandshakeFailure::Suite));
    }
    if buf[HEADER..HEADER + 8] != sid.as_bytes()[..] {
        return Err(fail(HandshakeFailure::Session));
    }
    Ok(&buf[HEADER + 8..])
}

fn key32(b: &[u8]) -> [u8; 32] {
    b[..32].try_into().expect("32 bytes")
}

fn transcript(sid: SessionId, init_id: &[u8; 32], init_eph: &[u8; 32], resp_id: &[u8; 32], resp_eph: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"bdmesh handshake v1");
    h.update([SUITE_AEAD_CHACHA20POLY1305, SUITE_KX_X25519]);
    h.update(sid.as_bytes());
    for part in [init_id, init_eph, resp_id, resp_eph] {
        h.update(part);
    }
    h.finalize().into()
}

fn signed(label: &[u8], th: &[u8; 32]) -> Vec<u8> {
    [label, th].concat()
}

fn verify(key: &IdentityPublic, label: &[u8], th: &[u8; 32], sig: &[u8]) -> Result<(), SecureError> {
    let sig = Signature::from_slice(sig).map_err(|_| fail(HandshakeFailure::Malformed))?;
    key.verifying()
        .verify_strict(&signed(label, th), &sig)
        .map_err(|_| fail(HandshakeFailure::Identity))
}

/// Returns (initiator-to-responder, responder-to-initiator) keys.
fn derive(sid: SessionId, dh: &[u8; 32], th: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let hk = Hkdf::<Sha256>::new(Some(sid.as_bytes()), dh);
    let mut okm = [0u8; 64];
    hk.expand(&signed(b"bdmesh keys", th), &mut okm)
        .expect("64 bytes is a valid hkdf length");
    (key32(&okm[..32]), key32(&okm[32..]))
}

fn agree(secret: EphemeralSecret, peer: [u8; 32]) -> Result<[u8; 32], SecureError> {
    let shared = secret.diffie_hellman(&PublicKey::from(peer));
    if !shared.was_contributory() {
        return Err(fail(HandshakeFailure::Malformed));
    }
    Ok(shared.to_bytes())
}

/// The side that starts the handshake.
pub struct Initiator {
    identity: IdentityKey,
    pinned: IdentityPublic,
    session: SessionId,
    eph_secret: EphemeralSecret,
    eph_public: [u8; 32],
}

impl Initiator {
    /// Returns the machine and the HELLO to send.
    pub fn start<R: RngCore + CryptoRng>(
        identity: &IdentityKey,
        pinned: IdentityPublic,
        session: SessionId,
        rng: &mut R,
    ) -> (Self, Vec<u8>) {
        let eph_secret = EphemeralSecret::random_from_rng(rng);
        let eph_public = PublicKey::from(&eph_secret).to_bytes();
        let mut hello = header(HandshakeKind::Hello).to_vec();
        hello.extend_from_slice(session.as_bytes());
        hello.extend_from_slice(&identity.public().to_bytes());
        hello.extend_from_slice(&eph_public);
        let me = Self {
            identity: identity.clone(),
            pinned,
            session,
            eph_secret,
            eph_public,
        };
        (me, hello)
    }

    /// Consume the REPLY; returns keys and the FINISH to send.
    pub fn complete(self, reply: &[u8]) -> Result<(SessionKeys, Vec<u8>), SecureError> {
        let body = parse(reply, HandshakeKind::Reply, REPLY_LEN, self.session)?;
        let resp_id = key32(&body[..32]);
        let resp_eph = key32(&body[32..64]);
        if resp_id != self.pinned.to_bytes() {
            return Err(fail(HandshakeFailure::Identity));
        }
        let init_id = self.identity.public().to_bytes();
        let th = transcript(self.session, &init_id, &self.eph_public, &resp_id, &resp_eph);
        verify(&self.pinned, b"reply", &th, &body[64..128])?;
        let dh = agree(self.eph_secret, resp_eph)?;
        let (i2r, r2i) = derive(self.session, &dh, &th);
        let sig = self.identity.signing().sign(&signed(b"finish", &th));
        let mut finish = header(HandshakeKind::Finish).to_vec();
        finish.extend_from_slice(self.session.as_bytes());
        finish.extend_from_slice(&sig.to_bytes());
        Ok((SessionKeys::new(self.session, i2r, r2i), finish))
    }
}

/// The side that answers a HELLO.
pub struct Responder {
    pinned: IdentityPublic,
    session: SessionId,
    th: [u8; 32],
    keys: ([u8; 32], [u8; 32]),
}

impl Responder {
    /// Check the HELLO against the pinned initiator key; returns the machine
    /// and the REPLY to send.
    pub fn accept<R: RngCore + CryptoRng>(
        identity: &IdentityKey,
        pinned: IdentityPublic,
        session: SessionId,
        hello: &[u8],
        rng: &mut R,
    ) -> Result<(Self, Vec<u8>), SecureError> {
        let body = parse(hello, HandshakeKind::Hello, HELLO_LEN, session)?;
        let init_id = key32(&body[..32]);
        let init_eph = key32(&body[32..64]);
        if init_id != pinned.to_bytes() {
            return Err(fail(HandshakeFailure::Identity));
        }
        let eph_secret = EphemeralSecret::random_from_rng(rng);
        let eph_public = PublicKey::from(&eph_secret).to_bytes();
        let resp_id = identity.public().to_bytes();
        let th = transcript(session, &init_id, &init_eph, &resp_id, &eph_public);
        let dh = agree(eph_secret, init_eph)?;
        let keys = derive(session, &dh, &th);
        let sig = identity.signing().sign(&signed(b"reply", &th));
        let mut reply = header(HandshakeKind::Reply).to_vec();
        reply.extend_from_slice(session.as_bytes());
        reply.extend_from_slice(&resp_id);
        reply.extend_from_slice(&eph_public);
        reply.extend_from_slice(&sig.to_bytes());
        Ok((
            Self {
                pinned,
                session,
                th,
                keys,
            },
            reply,
        ))
    }

    pub fn complete(self, finish: &[u8]) -> Result<SessionKeys, SecureError> {
        let body = parse(finish, HandshakeKind::Finish, FINISH_LEN, self.session)?;
        verify(&self.pinned, b"finish", &self.th, body)?;
        let (i2r, r2i) = self.keys;
        Ok(SessionKeys::new(self.session, r2i, i2r))
    }
}
