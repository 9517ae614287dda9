use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traversal::{NatClass, PunchConfig, Role};

/// Longest accepted control line, excluding the newline.
pub const MAX_LINE: usize = 8192;

pub const MESSAGE_TYPES: [&str; 12] = [
    "register",
    "registered",
    "observe",
    "observed",
    "introduce_request",
    "introduce",
    "relay_open",
    "relay_opened",
    "relay_data",
    "ping",
    "pong",
    "error",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl From<SocketAddrV4> for Endpoint {
    fn from(a: SocketAddrV4) -> Self {
        Self {
            ip: *a.ip(),
            port: a.port(),
        }
    }
}

impl From<Endpoint> for SocketAddrV4 {
    fn from(e: Endpoint) -> Self {
        SocketAddrV4::new(e.ip, e.port)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Punch parameters carried in an introduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PunchParams {
    pub open_ports: u32,
    pub rate: u32,
    pub max_seconds: u32,
}

impl Default for PunchParams {
    fn default() -> Self {
        Self {
            open_ports: 256,
            rate: 100,
            max_seconds: 20,
        }
    }
}

impl PunchParams {
    pub fn to_config(self, seed: u64) -> PunchConfig {
        PunchConfig {
            open_ports: self.open_ports,
            rate: self.rate,
            max_duration: std::time::Duration::from_secs(self.max_seconds as u64),
            seed,
            ..PunchConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    IdentityConflict,
    NotRegistered,
    NoSuchNode,
    NoSuchSession,
    PeerGone,
    UnknownType,
    BadRequest,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::IdentityConflict => "identity-conflict",
            ErrorCode::NotRegistered => "not-registered",
            ErrorCode::NoSuchNode => "no-such-node",
            ErrorCode::NoSuchSession => "no-such-session",
            ErrorCode::PeerGone => "peer-gone",
            ErrorCode::UnknownType => "unknown-type",
            ErrorCode::BadRequest => "bad-request",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ErrorCode::IdentityConflict,
            ErrorCode::NotRegistered,
            ErrorCode::NoSuchNode,
            ErrorCode::NoSuchSession,
            ErrorCode::PeerGone,
            ErrorCode::UnknownType,
            ErrorCode::BadRequest,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| format!("unknown error code {s:?}"))
    }
}

/// One line of the control protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Register {
        node_id: String,
        pubkey_b64: String,
        /// Self-reported classification; absent until the node has run it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nat: Option<NatClass>,
    },
    Registered {
        node_id: String,
        observed: Endpoint,
    },
    Observe {
        token: u64,
        /// Names the sender when the request arrives as a bare datagram.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node_id: Option<String>,
    },
    Observed {
        token: u64,
        endpoint: Endpoint,
    },
    IntroduceRequest {
        peer: String,
    },
    Introduce {
        session_id_hex: String,
        peer: String,
        peer_endpoint: Endpoint,
        peer_nat: NatClass,
        role: Role,
        punch: PunchParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        peer_pubkey_b64: Option<String>,
    },
    RelayOpen {
        session_id_hex: String,
    },
    RelayOpened {
        session_id_hex: String,
    },
    RelayData {
        session_id_hex: String,
        payload_b64: String,
    },
    Ping {
        nonce: u64,
    },
    Pong {
        nonce: u64,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl ControlMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ControlMessage::Error {
            code: code.as_str().to_string(),
            detail: detail.into(),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ControlMessage::Register { .. } => "register",
            ControlMessage::Registered { .. } => "registered",
            ControlMessage::Observe { .. } => "observe",
            ControlMessage::Observed { .. } => "observed",
            ControlMessage::IntroduceRequest { .. } => "introduce_request",
            ControlMessage::Introduce { .. } => "introduce",
            ControlMessage::RelayOpen { .. } => "relay_open",
            ControlMessage::RelayOpened { .. } => "relay_opened",
            ControlMessage::RelayData { .. } => "relay_data",
            ControlMessage::Ping { .. } => "ping",
            ControlMessage::Pong { .. } => "pong",
            ControlMessage::Error { .. } => "error",
        }
    }

    /// Serialize as one line including the trailing newline.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("control messages serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("line of {0} bytes exceeds the {MAX_LINE}-byte limit")]
    TooLong(usize),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl ProtocolError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ProtocolError::UnknownType(_) => ErrorCode::UnknownType,
            _ => ErrorCode::BadRequest,
        }
    }

    /// The reply a peer should get; the connection stays open.
    pub fn to_reply(&self) -> ControlMessage {
        ControlMessage::error(self.code(), self.to_string())
    }
}

/// Parse one line (a trailing `\n` or `\r\n` is ignored).
pub fn decode_line(line: &str) -> Result<ControlMessage, ProtocolError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.len() > MAX_LINE {
        return Err(ProtocolError::TooLong(line.len()));
    }
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| ProtocolError::Malformed("missing string field \"type\"".into()))?;
    if !MESSAGE_TYPES.contains(&kind) {
        return Err(ProtocolError::UnknownType(kind.to_string()));
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep() -> Endpoint {
        Endpoint {
            ip: Ipv4Addr::new(203, 0, 113, 7),
            port: 40001,
        }
    }

    #[test]
    fn exact_wire_shapes() {
        let cases = [
            (
                ControlMessage::Register {
                    node_id: "alice".into(),
                    pubkey_b64: "AAAA".into(),
                    nat: None,
                },
                r#"{"type":"register","node_id":"alice","pubkey_b64":"AAAA"}"#,
            ),
            (
                ControlMessage::Registered {
                    node_id: "alice".into(),
                    observed: ep(),
                },
                r#"{"type":"registered","node_id":"alice","observed":{"ip":"203.0.113.7","port":40001}}"#,
            ),
            (
                ControlMessage::Observe { token: 5, node_id: None },
                r#"{"type":"observe","token":5}"#,
            ),
            (
                ControlMessage::Observed { token: 5, endpoint: ep() },
                r#"{"type":"observed","token":5,"endpoint":{"ip":"203.0.113.7","port":40001}}"#,
            ),
            (
                ControlMessage::IntroduceRequest { peer: "bob".into() },
                r#"{"type":"introduce_request","peer":"bob"}"#,
            ),
            (
                ControlMessage::Introduce {
                    session_id_hex: "0011223344556677".into(),
                    peer: "bob".into(),
                    peer_endpoint: ep(),
                    peer_nat: NatClass::Hard,
                    role: Role::Prober,
                    punch: PunchParams::default(),
                    peer_pubkey_b64: None,
                },
                r#"{"type":"introduce","session_id_hex":"0011223344556677","peer":"bob","peer_endpoint":{"ip":"203.0.113.7","port":40001},"peer_nat":"hard","role":"prober","punch":{"open_ports":256,"rate":100,"max_seconds":20}}"#,
            ),
            (
                ControlMessage::RelayData {
                    session_id_hex: "00".into(),
                    payload_b64: "aGk=".into(),
                },
                r#"{"type":"relay_data","session_id_hex":"00","payload_b64":"aGk="}"#,
            ),
            (ControlMessage::Ping { nonce: 9 }, r#"{"type":"ping","nonce":9}"#),
            (
                ControlMessage::error(ErrorCode::NoSuchNode, "x"),
                r#"{"type":"error","code":"no-such-node","detail":"x"}"#,
            ),
        ];
        for (msg, wire) in cases {
            assert_eq!(serde_json::to_string(&msg).unwrap(), wire);
            assert_eq!(decode_line(wire).unwrap(), msg);
            assert!(MESSAGE_TYPES.contains(&msg.type_name()));
        }
    }

    #[test]
    fn unknown_type_and_bad_input() {
        let e = decode_line(r#"{"type":"teleport"}"#).unwrap_err();
        assert_eq!(e.code(), ErrorCode::UnknownType);
        assert_eq!(decode_line("not json").unwrap_err().code(), ErrorCode::BadRequest);
        assert_eq!(decode_line(r#"{"node_id":"a"}"#).unwrap_err().code(), ErrorCode::BadRequest);
        assert_eq!(decode_line(r#"{"type":"ping"}"#).unwrap_err().code(), ErrorCode::BadRequest);
        let reply = e.to_reply();
        assert!(matches!(reply, ControlMessage::Error { ref code, .. } if code == "unknown-type"));
    }

    #[test]
    fn line_limit() {
        let pad = "x".repeat(MAX_LINE);
        let long = format!(r#"{{"type":"introduce_request","peer":"{pad}"}}"#);
        assert_eq!(decode_line(&long).unwrap_err(), ProtocolError::TooLong(long.len()));
        let peer = "y".repeat(MAX_LINE - r#"{"type":"introduce_request","peer":""}"#.len());
        let exact = format!(r#"{{"type":"introduce_request","peer":"{peer}"}}"#);
        assert_eq!(exact.len(), MAX_LINE);
        assert!(decode_line(&format!("{exact}\n")).is_ok());
    }

    #[test]
    fn error_codes_round_trip() {
        for s in ["identity-conflict", "not-registered", "no-such-node", "no-such-session", "peer-gone", "unknown-type", "bad-request"] {
            assert_eq!(s.parse::<ErrorCode>().unwrap().as_str(), s);
        }
    }

    proptest! {
        #[test]
        fn relay_data_round_trips(sid in any::<[u8; 8]>(), payload in proptest::collection::vec(any::<u8>(), 0..1024)) {
            use base64::Engine;
            let msg = ControlMessage::RelayData {
                session_id_hex: hex::encode(sid),
                payload_b64: base64::engine::general_purpose::STANDARD.encode(&payload),
            };
            prop_assert_eq!(decode_line(&msg.to_line()).unwrap(), msg);
        }

        #[test]
        fn arbitrary_lines_never_panic(s in ".{0,200}") {
            let _ = decode_line(&s);
        }
    }
}
