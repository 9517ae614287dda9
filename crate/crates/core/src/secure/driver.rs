use std::time::Duration;

use rand::{CryptoRng, RngCore};

use super::{HandshakeFailure, HandshakeKind, IdentityKey, IdentityPublic, Initiator, Responder, SecureError, SessionKeys};
use crate::traversal::SessionId;

pub const HANDSHAKE_RETRANSMIT: Duration = Duration::from_millis(500);
pub const HANDSHAKE_SENDS: u8 = 10;

enum Phase {
    Waiting,
    Initiating { machine: Option<Initiator>, hello: Vec<u8> },
    Responding { machine: Option<Responder>, reply: Vec<u8> },
    Complete { finish: Option<Vec<u8>> },
    Failed(HandshakeFailure),
}

/// What the caller must do after feeding a handshake message.
#[derive(Default)]
pub struct HandshakeStep {
    pub send: Option<Vec<u8>>,
    pub keys: Option<SessionKeys>,
}

/// Drives one side of the handshake over a lossy path.
///
/// The initiator repeats HELLO and the responder repeats REPLY until the
/// next message arrives. A REPLY that shows up after completion means our
/// FINISH was lost, so it is answered again. Reliable paths call
/// [`LinkHandshake::reliable`] and never retransmit.
pub struct LinkHandshake {
    identity: IdentityKey,
    peer: IdentityPublic,
    session: SessionId,
    phase: Phase,
    retransmit: bool,
    sends: u8,
    next: Option<Duration>,
}

impl LinkHandshake {
    /// A side that waits for the peer's HELLO.
    pub fn responder(identity: &IdentityKey, peer: IdentityPublic, session: SessionId) -> Self {
        Self {
            identity: identity.clone(),
            peer,
            session,
            phase: Phase::Waiting,
            retransmit: true,
            sends: 0,
            next: None,
        }
    }

    /// Start as initiator; returns the HELLO to send.
    pub fn initiate<R: RngCore + CryptoRng>(
        identity: &IdentityKey,
        peer: IdentityPublic,
        session: SessionId,
        now: Duration,
        rng: &mut R,
    ) -> (Self, Vec<u8>) {
        let (machine, hello) = Initiator::start(identity, peer, session, rng);
        let hs = Self {
            identity: identity.clone(),
            peer,
            session,
            phase: Phase::Initiating {
                machine: Some(machine),
                hello: hello.clone(),
            },
            retransmit: true,
            sends: 1,
            next: Some(now + HANDSHAKE_RETRANSMIT),
        };
        (hs, hello)
    }

    pub fn reliable(mut self) -> Self {
        self.retransmit = false;
        self.next = None;
        self
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.phase, Phase::Complete { .. })
    }

    pub fn failure(&self) -> Option<HandshakeFailure> {
        match self.phase {
            Phase::Failed(f) => Some(f),
            _ => None,
        }
    }

    fn fail(&mut self, e: SecureError) {
        self.next = None;
        self.phase = Phase::Failed(match e {
            SecureError::HandshakeFailed(f) => f,
            _ => HandshakeFailure::Malformed,
        });
    }

    fn arm(&mut self, now: Duration) {
        self.sends = 1;
        self.next = self.retransmit.then_some(now + HANDSHAKE_RETRANSMIT);
    }

    pub fn handle_message<R: RngCore + CryptoRng>(&mut self, now: Duration, msg: &[u8], rng: &mut R) -> HandshakeStep {
        let Some(kind) = HandshakeKind::peek(msg) else {
            return HandshakeStep::default();
        };
        let mut step = HandshakeStep::default();
        match (kind, &mut self.phase) {
            (HandshakeKind::Hello, Phase::Waiting) => {
                match Responder::accept(&self.identity, self.peer, self.session, msg, rng) {
                    Ok((m, reply)) => {
                        step.send = Some(reply.clone());
                        self.phase = Phase::Responding {
                            machine: Some(m),
                            reply,
                        };
                        self.arm(now);
                    }
                    Err(e) => self.fail(e),
                }
            }
            (HandshakeKind::Hello, Phase::Responding { reply, .. }) => step.send = Some(reply.clone()),
            (HandshakeKind::Reply, Phase::Initiating { machine, .. }) => {
                match machine.take().expect("initiator present").complete(msg) {
                    Ok((keys, finish)) => {
                        step.send = Some(finish.clone());
                        step.keys = Some(keys);
                        self.phase = Phase::Complete { finish: Some(finish) };
                        self.next = None;
                    }
                    Err(e) => self.fail(e),
                }
            }
            (HandshakeKind::Reply, Phase::Complete { finish: Some(f) }) => step.send = Some(f.clone()),
            (HandshakeKind::Finish, Phase::Responding { machine, .. }) => {
                match machine.take().expect("responder present").complete(msg) {
                    Ok(keys) => {
                        step.keys = Some(keys);
                        self.phase = Phase::Complete { finish: None };
                        self.next = None;
                    }
                    Err(e) => self.fail(e),
                }
            }
            _ => {}
        }
        step
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        self.next
    }

    /// Message to repeat if the retransmit timer has fired.
    pub fn handle_timeout(&mut self, now: Duration) -> Option<Vec<u8>> {
        if self.next.is_none_or(|t| t > now) {
            return None;
        }
        if self.sends >= HANDSHAKE_SENDS {
            self.next = None;
            self.phase = Phase::Failed(HandshakeFailure::Timeout);
            return None;
        }
        let msg = match &self.phase {
            Phase::Initiating { hello, .. } => hello.clone(),
            Phase::Responding { reply, .. } => reply.clone(),
            _ => return None,
        };
        self.sends += 1;
        self.next = Some(now + HANDSHAKE_RETRANSMIT);
        Some(msg)
    }
}
