//! Coordination service: registration, endpoint observation, introductions
//! with role assignment, and the relay fallback.

pub mod coordinator;
pub mod protocol;

pub use coordinator::{ConnId, Coordinator, CoordinatorConfig, NodeRecord, Outbound, RelaySession};
pub use protocol::{decode_line, ControlMessage, Endpoint, ErrorCode, ProtocolError, PunchParams, MAX_LINE};
