//! NAT traversal: classification, direct punching, the birthday punch and
//! the session state machine that falls back to relaying.
//!
//! The punch machines are sans-IO. They are fed datagrams and timer
//! expirations and emit [`Transmit`]s, so the same code runs against the
//! simulator and against real UDP sockets.

mod classify;
mod packet;
mod punch;
mod session;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probability::{PortSpace, ProbabilityError};

pub use classify::{classify, ClassifyConfig, NatClassifier};
pub use packet::{looks_like_probe, PacketKind, ProbePacket, MAGIC, PACKET_LEN, VERSION};
pub use punch::{
    BirthdayOpener, BirthdayProber, DirectPunch, Punch, PunchMachine, PunchOutcome, PunchStats, CONFIRM_SENDS,
    DIRECT_INTERVAL, DIRECT_TIMEOUT,
};
pub use session::{DirectPath, SessionState, TraversalSession};

/// Highest probe rate a configuration may ask for.
pub const MAX_PROBE_RATE: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraversalError {
    #[error("invalid punch configuration: {0}")]
    InvalidConfig(String),
    #[error("illegal session transition from {from:?} to {to:?}")]
    IllegalTransition { from: SessionState, to: SessionState },
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

/// 8-byte session identifier, rendered as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SessionId([u8; 8]);

impl SessionId {
    pub const fn from_bytes(b: [u8; 8]) -> Self {
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; 8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for SessionId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut b = [0u8; 8];
        hex::decode_to_slice(s, &mut b)?;
        Ok(Self(b))
    }
}

/// What a node learned about the NAT in front of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NatClass {
    Public,
    Easy,
    Hard,
    UdpBlocked,
    #[default]
    Unknown,
}

impl NatClass {
    pub const ALL: [NatClass; 5] = [
        NatClass::Public,
        NatClass::Easy,
        NatClass::Hard,
        NatClass::UdpBlocked,
        NatClass::Unknown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NatClass::Public => "public",
            NatClass::Easy => "easy",
            NatClass::Hard => "hard",
            NatClass::UdpBlocked => "udp_blocked",
            NatClass::Unknown => "unknown",
        }
    }

    /// A single stable external endpoint that peers can target directly.
    pub fn is_reachable(&self) -> bool {
        matches!(self, NatClass::Public | NatClass::Easy)
    }
}

impl fmt::Display for NatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A node's part in one traversal session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Direct,
    Opener,
    Prober,
    Relay,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Direct => "direct",
            Role::Opener => "opener",
            Role::Prober => "prober",
            Role::Relay => "relay",
        })
    }
}

/// Role assignment for a pair of peers. Total and symmetric: swapping the
/// arguments swaps the result.
pub fn assign_roles(a: NatClass, b: NatClass) -> (Role, Role) {
    use NatClass::*;
    match (a, b) {
        (x, y) if x.is_reachable() && y.is_reachable() => (Role::Direct, Role::Direct),
        (Hard, y) if y.is_reachable() => (Role::Opener, Role::Prober),
        (x, Hard) if x.is_reachable() => (Role::Prober, Role::Opener),
        _ => (Role::Relay, Role::Relay),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Timeout,
    Resources,
    NoPath,
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailReason::Timeout => "timeout",
            FailReason::Resources => "resources",
            FailReason::NoPath => "no-path",
        })
    }
}

/// A datagram the caller must put on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmit {
    /// Index into the sockets the machine asked for.
    pub socket: usize,
    pub dst: std::net::SocketAddrV4,
    pub payload: Vec<u8>,
}

/// Parameters of a birthday punch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PunchConfig {
    pub open_ports: u32,
    /// Probes per second.
    pub rate: u32,
    pub max_duration: Duration,
    /// How often the opener re-sends to keep its mappings alive.
    pub refresh_interval: Duration,
    /// Grace period after `max_duration` for in-flight replies.
    pub linger: Duration,
    pub space: PortSpace,
    pub seed: u64,
}

impl Default for PunchConfig {
    fn default() -> Self {
        Self {
            open_ports: 256,
            rate: 100,
            max_duration: Duration::from_secs(20),
            refresh_interval: Duration::from_secs(15),
            linger: Duration::from_secs(1),
            space: PortSpace::default(),
            seed: 0,
        }
    }
}

impl PunchConfig {
    pub fn validate(&self) -> Result<(), TraversalError> {
        let err = |m: String| Err(TraversalError::InvalidConfig(m));
        if self.open_ports == 0 {
            return err("open_ports must be >= 1".into());
        }
        if self.open_ports > self.space.size() {
            return err(format!(
                "open_ports {} exceeds the port space size {}",
                self.open_ports,
                self.space.size()
            ));
        }
        if self.rate == 0 || self.rate > MAX_PROBE_RATE {
            return err(format!("rate must be in 1..={MAX_PROBE_RATE}, got {}", self.rate));
        }
        if self.budget() > self.space.size() {
            return err(format!(
                "max_duration * rate = {} exceeds the port space size {}",
                self.budget(),
                self.space.size()
            ));
        }
        if self.refresh_interval.is_zero() {
            return err("refresh_interval must be positive".into());
        }
        Ok(())
    }

    /// Probe budget `floor(max_duration * rate)`.
    pub fn budget(&self) -> u32 {
        (self.max_duration.as_micros() * self.rate as u128 / 1_000_000) as u32
    }

    /// Refresh at half the given mapping lifetime.
    pub fn with_mapping_ttl(mut self, ttl: Duration) -> Self {
        self.refresh_interval = ttl / 2;
        self
    }
}
