//! Authenticated encryption for overlay links.
//!
//! A three-message handshake binds an ephemeral X25519 exchange to both
//! nodes' pinned Ed25519 identities and to the session id. The derived
//! directional keys protect [`SecureFrame`]s with ChaCha20-Poly1305.
//! Unencrypted links use [`plain`] framing instead.

mod driver;
mod frame;
mod handshake;
pub mod plain;

use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

pub use driver::{HandshakeStep, LinkHandshake, HANDSHAKE_RETRANSMIT, HANDSHAKE_SENDS};
pub use frame::{LinkCodec, SecureFrame, SessionKeys, FRAME_HEADER, REPLAY_WINDOW, TAG_LEN};
pub use handshake::{
    HandshakeKind, Initiator, Responder, HANDSHAKE_MAGIC, SUITE_AEAD_CHACHA20POLY1305, SUITE_KX_X25519,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeFailure {
    /// A presented or signing key does not match the pinned identity.
    Identity,
    /// The message belongs to a different session.
    Session,
    /// An unknown cipher suite or version.
    Suite,
    Malformed,
    Timeout,
}

impl fmt::Display for HandshakeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HandshakeFailure::Identity => "identity",
            HandshakeFailure::Session => "session",
            HandshakeFailure::Suite => "suite",
            HandshakeFailure::Malformed => "malformed",
            HandshakeFailure::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SecureError {
    #[error("handshake-failed({0})")]
    HandshakeFailed(HandshakeFailure),
    #[error("auth-failure")]
    AuthFailure,
    #[error("replay")]
    Replay,
    #[error("window-overflow")]
    WindowOverflow,
    #[error("frame on channel {0} does not belong to this link")]
    WrongChannel(String),
    #[error("send counter exhausted")]
    CounterExhausted,
    #[error("malformed frame")]
    Malformed,
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

/// A node's long-term signing identity.
#[derive(Clone)]
pub struct IdentityKey(SigningKey);

impl fmt::Debug for IdentityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("IdentityKey").field(&self.public()).finish()
    }
}

impl IdentityKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(SigningKey::generate(rng))
    }

    pub fn from_secret_bytes(b: [u8; 32]) -> Self {
        Self(SigningKey::from_bytes(&b))
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> IdentityPublic {
        IdentityPublic(self.0.verifying_key())
    }

    pub(crate) fn signing(&self) -> &SigningKey {
        &self.0
    }
}

/// The public half that the coordinator stores and peers pin.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct IdentityPublic(VerifyingKey);

impl IdentityPublic {
    pub fn from_bytes(b: &[u8]) -> Result<Self, SecureError> {
        let arr: [u8; 32] = b
            .try_into()
            .map_err(|_| SecureError::InvalidKey(format!("expected 32 bytes, got {}", b.len())))?;
        VerifyingKey::from_bytes(&arr)
            .map(Self)
            .map_err(|e| SecureError::InvalidKey(e.to_string()))
    }

    pub fn from_b64(s: &str) -> Result<Self, SecureError> {
        let raw = B64.decode(s).map_err(|e| SecureError::InvalidKey(e.to_string()))?;
        Self::from_bytes(&raw)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn to_b64(&self) -> String {
        B64.encode(self.to_bytes())
    }

    pub(crate) fn verifying(&self) -> &VerifyingKey {
        &self.0
    }
}

impl fmt::Debug for IdentityPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IdentityPublic({})", hex::encode(&self.to_bytes()[..8]))
    }
}
