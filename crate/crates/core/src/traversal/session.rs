use std::fmt;
use std::net::SocketAddrV4;

use serde::Serialize;

use super::{FailReason, PunchStats, Role, SessionId, TraversalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Observing,
    Exchanging,
    Punching,
    EstablishedDirect,
    EstablishedRelayed,
    Failed,
}

impl SessionState {
    pub const ALL: [SessionState; 7] = [
        SessionState::Idle,
        SessionState::Observing,
        SessionState::Exchanging,
        SessionState::Punching,
        SessionState::EstablishedDirect,
        SessionState::EstablishedRelayed,
        SessionState::Failed,
    ];

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            SessionState::EstablishedDirect | SessionState::EstablishedRelayed | SessionState::Failed
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::Observing => "observing",
            SessionState::Exchanging => "exchanging",
            SessionState::Punching => "punching",
            SessionState::EstablishedDirect => "established_direct",
            SessionState::EstablishedRelayed => "established_relayed",
            SessionState::Failed => "failed",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Local and remote endpoints of an established direct path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DirectPath {
    pub local: SocketAddrV4,
    pub remote: SocketAddrV4,
}

/// Lifecycle of one traversal attempt on one node.
///
/// Only forward moves along `idle -> observing -> exchanging -> punching`
/// are allowed, and a session may fail from any live state. Relaying is
/// reachable only through [`TraversalSession::fallback`].
#[derive(Debug, Clone)]
pub struct TraversalSession {
    id: Option<SessionId>,
    role: Option<Role>,
    state: SessionState,
    path: Option<DirectPath>,
    stats: PunchStats,
    failure: Option<FailReason>,
    fallback_reason: Option<FailReason>,
}

impl Default for TraversalSession {
    fn default() -> Self {
        Self::new()
    }
}

impl TraversalSession {
    pub fn new() -> Self {
        Self {
            id: None,
            role: None,
            state: SessionState::Idle,
            path: None,
            stats: PunchStats::default(),
            failure: None,
            fallback_reason: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn id(&self) -> Option<SessionId> {
        self.id
    }

    pub fn role(&self) -> Option<Role> {
        self.role
    }

    pub fn path(&self) -> Option<DirectPath> {
        self.path
    }

    pub fn stats(&self) -> PunchStats {
        self.stats
    }

    pub fn failure(&self) -> Option<FailReason> {
        self.failure
    }

    /// Why a relayed session gave up on the direct path, if it tried one.
    pub fn fallback_reason(&self) -> Option<FailReason> {
        self.fallback_reason
    }

    fn step(&mut self, from: &[SessionState], to: SessionState) -> Result<(), TraversalError> {
        if !from.contains(&self.state) {
            return Err(TraversalError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    pub fn begin_observing(&mut self) -> Result<(), TraversalError> {
        self.step(&[SessionState::Idle], SessionState::Observing)
    }

    /// The peer introduction arrived.
    pub fn begin_exchanging(&mut self, id: SessionId, role: Role) -> Result<(), TraversalError> {
        self.step(&[SessionState::Observing], SessionState::Exchanging)?;
        self.id = Some(id);
        self.role = Some(role);
        Ok(())
    }

    pub fn begin_punching(&mut self) -> Result<(), TraversalError> {
        if self.role == Some(Role::Relay) {
            return Err(TraversalError::IllegalTransition {
                from: self.state,
                to: SessionState::Punching,
            });
        }
        self.step(&[SessionState::Exchanging], SessionState::Punching)
    }

    pub fn establish_direct(&mut self, path: DirectPath, stats: PunchStats) -> Result<(), TraversalError> {
        self.step(&[SessionState::Punching], SessionState::EstablishedDirect)?;
        self.path = Some(path);
        self.stats = stats;
        Ok(())
    }

    /// Switch to the relay after a failure signal, or straight away when the
    /// role says there is no direct path to try.
    pub fn fallback(&mut self, signal: Option<FailReason>, stats: PunchStats) -> Result<(), TraversalError> {
        self.step(
            &[SessionState::Exchanging, SessionState::Punching],
            SessionState::EstablishedRelayed,
        )?;
        self.fallback_reason = signal;
        self.stats = stats;
        Ok(())
    }

    pub fn fail(&mut self, reason: FailReason) -> Result<(), TraversalError> {
        self.step(
            &[
                SessionState::Idle,
                SessionState::Observing,
                SessionState::Exchanging,
                SessionState::Punching,
            ],
            SessionState::Failed,
        )?;
        self.failure = Some(reason);
        Ok(())
    }
}
