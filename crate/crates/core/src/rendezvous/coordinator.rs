use std::collections::BTreeMap;
use std::net::SocketAddrV4;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::{decode_line, ControlMessage, Endpoint, ErrorCode, PunchParams};
use crate::traversal::{assign_roles, NatClass, SessionId};

pub const MAX_NODE_ID: usize = 64;

/// Identifies one control channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorConfig {
    pub registration_ttl: Duration,
    pub punch: PunchParams,
    pub seed: u64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            registration_ttl: Duration::from_secs(60),
            punch: PunchParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: String,
    pub pubkey: Vec<u8>,
    pub nat_class: NatClass,
    /// Source of the most recent control message.
    pub control_source: Endpoint,
    /// Source of the most recent datagram observation, per listener.
    pub datagram_source: [Option<Endpoint>; 2],
    pub expires: Duration,
    pub conn: ConnId,
}

impl NodeRecord {
    /// The endpoint peers should target: the first listener's datagram
    /// observation when there is one, otherwise the control source.
    pub fn observed(&self) -> Endpoint {
        self.datagram_source[0].unwrap_or(self.control_source)
    }

    pub fn pubkey_b64(&self) -> String {
        B64.encode(&self.pubkey)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelaySession {
    pub session_id: SessionId,
    pub nodes: [String; 2],
    pub opened: [bool; 2],
    /// Bytes forwarded from `nodes[0]` to `nodes[1]` and back.
    pub forwarded: [u64; 2],
    pub frames: [u64; 2],
}

impl RelaySession {
    fn side(&self, node: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == node)
    }
}

/// Something the coordinator wants sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    Control { conn: ConnId, msg: ControlMessage },
    /// Reply on datagram listener `listener`.
    Datagram {
        listener: usize,
        dst: SocketAddrV4,
        msg: ControlMessage,
    },
}

/// Sans-IO rendezvous server. Callers feed it lines and datagrams and carry
/// out the returned [`Outbound`]s.
#[derive(Debug, Clone)]
pub struct Coordinator {
    cfg: CoordinatorConfig,
    rng: ChaCha8Rng,
    nodes: BTreeMap<String, NodeRecord>,
    conns: BTreeMap<ConnId, String>,
    sessions: BTreeMap<SessionId, RelaySession>,
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            nodes: BTreeMap::new(),
            conns: BTreeMap::new(),
            sessions: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    /// A live (unexpired) registration.
    pub fn node(&self, id: &str, now: Duration) -> Option<&NodeRecord> {
        self.nodes.get(id).filter(|n| now < n.expires)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn session(&self, id: SessionId) -> Option<&RelaySession> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &RelaySession> {
        self.sessions.values()
    }

    fn reply(conn: ConnId, msg: ControlMessage) -> Vec<Outbound> {
        vec![Outbound::Control { conn, msg }]
    }

    fn err(conn: ConnId, code: ErrorCode, detail: impl Into<String>) -> Vec<Outbound> {
        Self::reply(conn, ControlMessage::error(code, detail))
    }

    /// The live node bound to `conn`.
    fn sender(&self, conn: ConnId, now: Duration) -> Option<&NodeRecord> {
        let id = self.conns.get(&conn)?;
        self.node(id, now).filter(|n| n.conn == conn)
    }

    /// The channel closed.
    pub fn disconnect(&mut self, conn: ConnId) {
        if let Some(id) = self.conns.remove(&conn) {
            if self.nodes.get(&id).is_some_and(|n| n.conn == conn) {
                self.nodes.remove(&id);
            }
        }
    }

    /// One line arrived on control channel `conn` whose far end is `src`.
    pub fn handle_line(&mut self, now: Duration, conn: ConnId, src: SocketAddrV4, line: &str) -> Vec<Outbound> {
        let msg = match decode_line(line) {
            Ok(m) => m,
            Err(e) => return Self::reply(conn, e.to_reply()),
        };
        if let Some(id) = self.conns.get(&conn).cloned() {
            if let Some(rec) = self.nodes.get_mut(&id).filter(|n| n.conn == conn) {
                rec.control_source = src.into();
            }
        }
        match msg {
            ControlMessage::Register { node_id, pubkey_b64, nat } => {
                self.register(now, conn, src, node_id, &pubkey_b64, nat)
            }
            ControlMessage::Observe { token, .. } => match self.sender(conn, now) {
                Some(_) => Self::reply(
                    conn,
                    ControlMessage::Observed {
                        token,
                        endpoint: src.into(),
                    },
                ),
                None => Self::err(conn, ErrorCode::NotRegistered, "register first"),
            },
            ControlMessage::IntroduceRequest { peer } => self.introduce(now, conn, &peer),
            ControlMessage::RelayOpen { session_id_hex } => self.relay_open(now, conn, &session_id_hex),
            ControlMessage::RelayData {
                session_id_hex,
                payload_b64,
            } => self.relay_data(now, conn, &session_id_hex, payload_b64),
            ControlMessage::Ping { nonce } => {
                let ttl = self.cfg.registration_ttl;
                if let Some(id) = self.conns.get(&conn) {
                    if let Some(rec) = self.nodes.get_mut(id).filter(|n| n.conn == conn && now < n.expires) {
                        rec.expires = now + ttl;
                    }
                }
                Self::reply(conn, ControlMessage::Pong { nonce })
            }
            other => Self::err(
                conn,
                ErrorCode::BadRequest,
                format!("{} is not a client message", other.type_name()),
            ),
        }
    }

    /// A datagram arrived on listener `listener` (0 or 1) from `src`.
    pub fn handle_datagram(&mut self, now: Duration, listener: usize, src: SocketAddrV4, data: &[u8]) -> Vec<Outbound> {
        let send = |msg| {
            vec![Outbound::Datagram {
                listener,
                dst: src,
                msg,
            }]
        };
        let Ok(text) = std::str::from_utf8(data) else {
            return send(ControlMessage::error(ErrorCode::BadRequest, "not utf-8"));
        };
        let msg = match decode_line(text) {
            Ok(m) => m,
            Err(e) => return send(e.to_reply()),
        };
        let ControlMessage::Observe { token, node_id } = msg else {
            return send(ControlMessage::error(
                ErrorCode::BadRequest,
                "only observe is accepted as a datagram",
            ));
        };
        let rec = node_id
            .as_deref()
            .and_then(|id| self.nodes.get_mut(id))
            .filter(|n| now < n.expires);
        match rec {
            Some(rec) => {
                if let Some(slot) = rec.datagram_source.get_mut(listener) {
                    *slot = Some(src.into());
                }
                send(ControlMessage::Observed {
                    token,
                    endpoint: src.into(),
                })
            }
            None => send(ControlMessage::error(ErrorCode::NotRegistered, "register first")),
        }
    }

    fn register(
        &mut self,
        now: Duration,
        conn: ConnId,
        src: SocketAddrV4,
        node_id: String,
        pubkey_b64: &str,
        nat: Option<NatClass>,
    ) -> Vec<Outbound> {
        if node_id.is_empty() || node_id.len() > MAX_NODE_ID {
            return Self::err(conn, ErrorCode::BadRequest, format!("node_id must be 1..={MAX_NODE_ID} bytes"));
        }
        let Ok(pubkey) = B64.decode(pubkey_b64) else {
            return Self::err(conn, ErrorCode::BadRequest, "pubkey_b64 is not base64");
        };
        let ttl = self.cfg.registration_ttl;
        let rec = match self.nodes.get_mut(&node_id).filter(|n| now < n.expires) {
            Some(rec) if rec.pubkey != pubkey => {
                return Self::err(conn, ErrorCode::IdentityConflict, format!("{node_id} is registered with another key"));
            }
            Some(rec) => {
                if rec.conn != conn {
                    self.conns.remove(&rec.conn);
                    rec.conn = conn;
                }
                rec.control_source = src.into();
                rec.expires = now + ttl;
                if let Some(nat) = nat {
                    rec.nat_class = nat;
                }
                rec.clone()
            }
            None => {
                let rec = NodeRecord {
                    node_id: node_id.clone(),
                    pubkey,
                    nat_class: nat.unwrap_or_default(),
                    control_source: src.into(),
                    datagram_source: [None; 2],
                    expires: now + ttl,
                    conn,
                };
                self.nodes.insert(node_id.clone(), rec.clone());
                rec
            }
        };
        if let Some(old) = self.conns.insert(conn, node_id.clone()) {
            if old != node_id && self.nodes.get(&old).is_some_and(|n| n.conn == conn) {
                self.nodes.remove(&old);
            }
        }
        log::debug!("registered {node_id} as {} at {}", rec.nat_class, rec.observed());
        Self::reply(
            conn,
            ControlMessage::Registered {
                node_id,
                observed: rec.observed(),
            },
        )
    }

    fn introduce(&mut self, now: Duration, conn: ConnId, peer: &str) -> Vec<Outbound> {
        let Some(a) = self.sender(conn, now).cloned() else {
            return Self::err(conn, ErrorCode::NotRegistered, "register first");
        };
        let Some(b) = self.node(peer, now).cloned() else {
            return Self::err(conn, ErrorCode::NoSuchNode, format!("no live node {peer:?}"));
        };
        if a.node_id == b.node_id {
            return Self::err(conn, ErrorCode::BadRequest, "cannot introduce a node to itself");
        }
        let mut raw = [0u8; 8];
        loop {
            self.rng.fill_bytes(&mut raw);
            if !self.sessions.contains_key(&SessionId::from_bytes(raw)) {
                break;
            }
        }
        let sid = SessionId::from_bytes(raw);
        let (role_a, role_b) = assign_roles(a.nat_class, b.nat_class);
        self.sessions.insert(
            sid,
            RelaySession {
                session_id: sid,
                nodes: [a.node_id.clone(), b.node_id.clone()],
                opened: [false; 2],
                forwarded: [0; 2],
                frames: [0; 2],
            },
        );
        log::info!("introduce {} ({role_a}) <-> {} ({role_b}) session {sid}", a.node_id, b.node_id);
        let intro = |me: &NodeRecord, other: &NodeRecord, role| ControlMessage::Introduce {
            session_id_hex: sid.to_hex(),
            peer: other.node_id.clone(),
            peer_endpoint: other.observed(),
            peer_nat: other.nat_class,
            role,
            punch: self.cfg.punch,
            peer_pubkey_b64: Some(other.pubkey_b64()),
        }
        .with_conn(me.conn);
        vec![intro(&a, &b, role_a), intro(&b, &a, role_b)]
    }

    fn lookup_session(&self, now: Duration, conn: ConnId, hex_id: &str) -> Result<(SessionId, usize), Vec<Outbound>> {
        let Some(me) = self.sender(conn, now) else {
            return Err(Self::err(conn, ErrorCode::NotRegistered, "register first"));
        };
        let no_session = || Self::err(conn, ErrorCode::NoSuchSession, format!("no session {hex_id}"));
        let sid: SessionId = hex_id.parse().map_err(|_| no_session())?;
        let side = self
            .sessions
            .get(&sid)
            .and_then(|s| s.side(&me.node_id))
            .ok_or_else(no_session)?;
        Ok((sid, side))
    }

    fn relay_open(&mut self, now: Duration, conn: ConnId, hex_id: &str) -> Vec<Outbound> {
        let (sid, side) = match self.lookup_session(now, conn, hex_id) {
            Ok(v) => v,
            Err(out) => return out,
        };
        let session = self.sessions.get_mut(&sid).expect("looked up");
        session.opened[side] = true;
        let other = session.nodes[1 - side].clone();
        let mut out = Self::reply(
            conn,
            ControlMessage::RelayOpened {
                session_id_hex: sid.to_hex(),
            },
        );
        // Tell the counterpart, which treats it as a signal to stop punching.
        if let Some(peer) = self.node(&other, now) {
            out.push(Outbound::Control {
                conn: peer.conn,
                msg: ControlMessage::RelayOpen {
                    session_id_hex: sid.to_hex(),
                },
            });
        }
        out
    }

    fn relay_data(&mut self, now: Duration, conn: ConnId, hex_id: &str, payload_b64: String) -> Vec<Outbound> {
        let (sid, side) = match self.lookup_session(now, conn, hex_id) {
            Ok(v) => v,
            Err(out) => return out,
        };
        let session = &self.sessions[&sid];
        if !session.opened.iter().all(|o| *o) {
            return Self::err(conn, ErrorCode::NoSuchSession, format!("relay {sid} is not open on both sides"));
        }
        let Ok(payload) = B64.decode(&payload_b64) else {
            return Self::err(conn, ErrorCode::BadRequest, "payload_b64 is not base64");
        };
        let other = session.nodes[1 - side].clone();
        let Some(peer_conn) = self.node(&other, now).map(|n| n.conn) else {
            return Self::err(conn, ErrorCode::PeerGone, format!("{other} is gone"));
        };
        let session = self.sessions.get_mut(&sid).expect("looked up");
        session.forwarded[side] += payload.len() as u64;
        session.frames[side] += 1;
        vec![Outbound::Control {
            conn: peer_conn,
            msg: ControlMessage::RelayData {
                session_id_hex: sid.to_hex(),
                payload_b64,
            },
        }]
    }
}

trait WithConn {
    fn with_conn(self, conn: ConnId) -> Outbound;
}

impl WithConn for ControlMessage {
    fn with_conn(self, conn: ConnId) -> Outbound {
        Outbound::Control { conn, msg: self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traversal::Role;
    use std::net::Ipv4Addr;

    const T0: Duration = Duration::ZERO;

    fn src(last: u8, port: u16) -> SocketAddrV4 {
        SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, last), port)
    }

    fn reg(id: &str, key: &[u8], nat: Option<NatClass>) -> String {
        ControlMessage::Register {
            node_id: id.into(),
            pubkey_b64: B64.encode(key),
            nat,
        }
        .to_line()
    }

    fn only_msg(out: Vec<Outbound>) -> ControlMessage {
        assert_eq!(out.len(), 1, "{out:?}");
        match out.into_iter().next().unwrap() {
            Outbound::Control { msg, .. } | Outbound::Datagram { msg, .. } => msg,
        }
    }

    fn code(msg: &ControlMessage) -> &str {
        match msg {
            ControlMessage::Error { code, .. } => code,
            other => panic!("expected error, got {other:?}"),
        }
    }

    #[test]
    fn register_refresh_and_conflict() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let r = only_msg(c.handle_line(T0, ConnId(1), src(1, 5000), &reg("alice", b"k1", None)));
        assert_eq!(
            r,
            ControlMessage::Registered {
                node_id: "alice".into(),
                observed: src(1, 5000).into()
            }
        );
        let again = only_msg(c.handle_line(T0, ConnId(1), src(1, 5000), &reg("alice", b"k1", None)));
        assert_eq!(again, r);
        let clash = only_msg(c.handle_line(T0, ConnId(2), src(2, 5000), &reg("alice", b"k2", None)));
        assert_eq!(code(&clash), "identity-conflict");
        // Once the registration lapses the id is free again.
        let later = Duration::from_secs(61);
        let r = only_msg(c.handle_line(later, ConnId(2), src(2, 5000), &reg("alice", b"k2", None)));
        assert!(matches!(r, ControlMessage::Registered { .. }));
    }

    #[test]
    fn observe_requires_registration() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let obs = ControlMessage::Observe { token: 4, node_id: None }.to_line();
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(1), src(1, 1), &obs))), "not-registered");
        c.handle_line(T0, ConnId(1), src(1, 1), &reg("a", b"k", None));
        let r = only_msg(c.handle_line(T0, ConnId(1), src(1, 777), &obs));
        assert_eq!(
            r,
            ControlMessage::Observed {
                token: 4,
                endpoint: src(1, 777).into()
            }
        );
        // The datagram path names the sender explicitly.
        let dg = ControlMessage::Observe {
            token: 5,
            node_id: Some("a".into()),
        }
        .to_line();
        let out = c.handle_datagram(T0, 1, src(9, 4242), dg.as_bytes());
        assert_eq!(
            out,
            vec![Outbound::Datagram {
                listener: 1,
                dst: src(9, 4242),
                msg: ControlMessage::Observed {
                    token: 5,
                    endpoint: src(9, 4242).into()
                }
            }]
        );
        let stranger = ControlMessage::Observe {
            token: 5,
            node_id: Some("zed".into()),
        }
        .to_line();
        assert_eq!(code(&only_msg(c.handle_datagram(T0, 0, src(9, 1), stranger.as_bytes()))), "not-registered");
        // Control source keeps updating, but the datagram view wins once known.
        c.handle_datagram(T0, 0, src(9, 4000), dg.as_bytes());
        assert_eq!(c.node("a", T0).unwrap().observed(), src(9, 4000).into());
    }

    fn introduced(a: NatClass, b: NatClass) -> (ControlMessage, ControlMessage) {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.handle_line(T0, ConnId(1), src(1, 1), &reg("a", b"ka", Some(a)));
        c.handle_line(T0, ConnId(2), src(2, 2), &reg("b", b"kb", Some(b)));
        let req = ControlMessage::IntroduceRequest { peer: "b".into() }.to_line();
        let out = c.handle_line(T0, ConnId(1), src(1, 1), &req);
        assert_eq!(out.len(), 2);
        let mut msgs = out.into_iter().map(|o| match o {
            Outbound::Control { msg, .. } => msg,
            _ => unreachable!(),
        });
        (msgs.next().unwrap(), msgs.next().unwrap())
    }

    fn role(m: &ControlMessage) -> Role {
        match m {
            ControlMessage::Introduce { role, .. } => *role,
            _ => panic!(),
        }
    }

    #[test]
    fn introduce_assigns_roles() {
        let (a, b) = introduced(NatClass::Easy, NatClass::Hard);
        assert_eq!((role(&a), role(&b)), (Role::Prober, Role::Opener));
        let (a, b) = introduced(NatClass::Easy, NatClass::Easy);
        assert_eq!((role(&a), role(&b)), (Role::Direct, Role::Direct));
        let (a, b) = introduced(NatClass::Hard, NatClass::Hard);
        assert_eq!((role(&a), role(&b)), (Role::Relay, Role::Relay));
        let ControlMessage::Introduce {
            peer,
            peer_endpoint,
            peer_nat,
            session_id_hex,
            peer_pubkey_b64,
            ..
        } = a
        else {
            panic!()
        };
        assert_eq!(peer, "b");
        assert_eq!(peer_endpoint, src(2, 2).into());
        assert_eq!(peer_nat, NatClass::Hard);
        assert_eq!(session_id_hex.len(), 16);
        assert_eq!(peer_pubkey_b64.unwrap(), B64.encode(b"kb"));
    }

    #[test]
    fn introduce_unknown_or_expired_peer() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.handle_line(T0, ConnId(1), src(1, 1), &reg("a", b"ka", None));
        let req = ControlMessage::IntroduceRequest { peer: "ghost".into() }.to_line();
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(1), src(1, 1), &req))), "no-such-node");
        c.handle_line(T0, ConnId(2), src(2, 2), &reg("b", b"kb", None));
        // Keep "a" alive with pings, let "b" lapse.
        let ping = ControlMessage::Ping { nonce: 1 }.to_line();
        c.handle_line(Duration::from_secs(50), ConnId(1), src(1, 1), &ping);
        let req = ControlMessage::IntroduceRequest { peer: "b".into() }.to_line();
        let out = c.handle_line(Duration::from_secs(70), ConnId(1), src(1, 1), &req);
        assert_eq!(code(&only_msg(out)), "no-such-node");
    }

    fn relay_pair() -> (Coordinator, String) {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.handle_line(T0, ConnId(1), src(1, 1), &reg("a", b"ka", Some(NatClass::Hard)));
        c.handle_line(T0, ConnId(2), src(2, 2), &reg("b", b"kb", Some(NatClass::Hard)));
        let req = ControlMessage::IntroduceRequest { peer: "b".into() }.to_line();
        let out = c.handle_line(T0, ConnId(1), src(1, 1), &req);
        let Outbound::Control {
            msg: ControlMessage::Introduce { session_id_hex, .. },
            ..
        } = &out[0]
        else {
            panic!()
        };
        (c, session_id_hex.clone())
    }

    fn data(sid: &str, payload: &[u8]) -> String {
        ControlMessage::RelayData {
            session_id_hex: sid.into(),
            payload_b64: B64.encode(payload),
        }
        .to_line()
    }

    #[test]
    fn relay_requires_both_sides_open() {
        let (mut c, sid) = relay_pair();
        let early = c.handle_line(T0, ConnId(1), src(1, 1), &data(&sid, b"hi"));
        assert_eq!(code(&only_msg(early)), "no-such-session");
        let open = ControlMessage::RelayOpen {
            session_id_hex: sid.clone(),
        }
        .to_line();
        let out = c.handle_line(T0, ConnId(1), src(1, 1), &open);
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[1],
            Outbound::Control {
                conn: ConnId(2),
                msg: ControlMessage::RelayOpen {
                    session_id_hex: sid.clone()
                }
            }
        );
        c.handle_line(T0, ConnId(2), src(2, 2), &open);
        let payload: Vec<u8> = (0..1024u32).map(|i| i as u8).collect();
        let out = c.handle_line(T0, ConnId(1), src(1, 1), &data(&sid, &payload));
        assert_eq!(
            out,
            vec![Outbound::Control {
                conn: ConnId(2),
                msg: ControlMessage::RelayData {
                    session_id_hex: sid.clone(),
                    payload_b64: B64.encode(&payload)
                }
            }]
        );
        let s = c.session(sid.parse().unwrap()).unwrap();
        assert_eq!(s.forwarded, [1024, 0]);
        // Outsiders and bogus ids are rejected.
        c.handle_line(T0, ConnId(3), src(3, 3), &reg("c", b"kc", None));
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(3), src(3, 3), &data(&sid, b"x")))), "no-such-session");
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(1), src(1, 1), &data("zz", b"x")))), "no-such-session");
        c.disconnect(ConnId(2));
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(1), src(1, 1), &data(&sid, b"x")))), "peer-gone");
    }

    #[test]
    fn relay_preserves_order() {
        let (mut c, sid) = relay_pair();
        let open = ControlMessage::RelayOpen {
            session_id_hex: sid.clone(),
        }
        .to_line();
        c.handle_line(T0, ConnId(1), src(1, 1), &open);
        c.handle_line(T0, ConnId(2), src(2, 2), &open);
        let mut got = Vec::new();
        for i in 0..100u32 {
            for o in c.handle_line(T0, ConnId(2), src(2, 2), &data(&sid, &i.to_be_bytes())) {
                if let Outbound::Control {
                    msg: ControlMessage::RelayData { payload_b64, .. },
                    ..
                } = o
                {
                    got.push(u32::from_be_bytes(B64.decode(payload_b64).unwrap().try_into().unwrap()));
                }
            }
        }
        assert_eq!(got, (0..100).collect::<Vec<_>>());
        assert_eq!(c.session(sid.parse().unwrap()).unwrap().frames, [0, 100]);
    }

    #[test]
    fn garbage_gets_error_and_keeps_state() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        c.handle_line(T0, ConnId(1), src(1, 1), &reg("a", b"ka", None));
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(1), src(1, 1), r#"{"type":"warp"}"#))), "unknown-type");
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(1), src(1, 1), "{"))), "bad-request");
        assert!(c.node("a", T0).is_some());
        let long_id = "x".repeat(65);
        assert_eq!(code(&only_msg(c.handle_line(T0, ConnId(2), src(2, 2), &reg(&long_id, b"k", None)))), "bad-request");
    }
}
