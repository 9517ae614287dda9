//! The rendezvous coordinator and a node agent over real sockets.
//!
//! Both wrap the same sans-IO machines the simulator drives: the
//! coordinator state machine, the NAT classifier, the punch machines and
//! the link handshake.

mod coord;
mod node;

use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::exit::Exit;

pub use coord::{run_coordinator, CoordOptions};
pub use node::{load_or_create_key, run_node, LinkSummary, NodeOptions, NodeSummary};

/// How often blocking loops wake up to check for shutdown.
pub(crate) const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}")]
    Bind { addr: String, source: io::Error },
    #[error("coordinator {0} unreachable")]
    CoordUnreachable(String),
    #[error("identity conflict: {0}")]
    IdentityConflict(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("gave up: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ServiceError {
    pub fn exit(&self) -> Exit {
        match self {
            ServiceError::Bind { .. } => Exit::BindFailure,
            ServiceError::CoordUnreachable(_) => Exit::CoordUnreachable,
            ServiceError::IdentityConflict(_) => Exit::IdentityConflict,
            ServiceError::Invalid(_) => Exit::InvalidInput,
            ServiceError::Failed(_) | ServiceError::Io(_) => Exit::SimFailure,
        }
    }
}
