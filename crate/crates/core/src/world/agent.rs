use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::app::{bulk_payload, AppMessage, BULK_CHUNK};
use crate::mesh::{route_lookup, MeshPlan, NextHop};
use crate::netsim::{HostEvent, HostId, Network, SimTime};
use crate::rendezvous::{ControlMessage, Endpoint, PunchParams};
use crate::secure::{HandshakeFailure, HandshakeKind, IdentityKey, IdentityPublic, LinkCodec, LinkHandshake};
use crate::seed::derive;
use crate::traversal::{
    BirthdayOpener, BirthdayProber, ClassifyConfig, DirectPath, DirectPunch, FailReason, NatClass, NatClassifier,
    ProbePacket, Punch, PunchMachine, PunchOutcome, Role, SessionId, SessionState, TraversalSession,
};

pub(super) const TAG_WAKE: u64 = 0;
/// Nobody asks for introductions before every node has had time to
/// classify itself.
const INTRO_AT: SimTime = SimTime::from_secs(4);
const INTRO_RETRY: SimTime = SimTime::from_secs(1);
const INTRO_TRIES: u8 = 5;
const RETX: SimTime = SimTime::from_millis(500);
const PING_TRIES: u8 = 3;
const MARKER_TRIES: u8 = 6;
const KEEPALIVE: SimTime = SimTime::from_secs(20);

pub(super) struct Ctx<'a> {
    pub net: &'a mut Network,
    pub plan: &'a MeshPlan,
    pub coord: HostId,
    pub observers: [SocketAddrV4; 2],
    pub bulk_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Registering,
    Classifying,
    Ready,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transport {
    None,
    Direct { local_port: u16, remote: SocketAddrV4 },
    Relay,
}

pub(super) struct LinkSession {
    pub peer: String,
    pub sid: SessionId,
    pub role: Role,
    pub ts: TraversalSession,
    punch: Option<Punch>,
    ports: Vec<u16>,
    pub encrypted: bool,
    transport: Transport,
    relay_open_sent: bool,
    relay_opened: bool,
    peer_relay_open: bool,
    /// The peer fell back first and told us through the coordinator.
    pub peer_fallback: bool,
    peer_key: Option<IdentityPublic>,
    hs: Option<LinkHandshake>,
    /// Introduced without a key we could pin.
    missing_key: bool,
    codec: Option<LinkCodec>,
    pub marker_sent: Vec<u8>,
    pub marker_received: Option<Vec<u8>>,
    marker_acked: bool,
    marker_tries: u8,
    marker_next: SimTime,
    bulk_rx: BTreeMap<u16, Vec<u8>>,
    pub bulk_ok: Option<bool>,
    pub rejected_frames: u64,
}

impl LinkSession {
    pub fn handshake_ok(&self) -> bool {
        self.hs.as_ref().is_some_and(LinkHandshake::is_complete)
    }

    pub fn handshake_failure(&self) -> Option<HandshakeFailure> {
        if self.missing_key {
            return Some(HandshakeFailure::Identity);
        }
        self.hs.as_ref().and_then(LinkHandshake::failure)
    }

    pub fn is_relayed(&self) -> bool {
        self.transport == Transport::Relay
    }

    fn ready(&self) -> bool {
        self.codec.is_some()
    }

    fn marker_due(&self) -> Option<SimTime> {
        let pending = self.ready() && !self.marker_acked && (1..MARKER_TRIES).contains(&self.marker_tries);
        pending.then_some(self.marker_next)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct PingState {
    pub dst: Ipv4Addr,
    pub seq: u32,
    pub tries: u8,
    pub next: SimTime,
    pub ok: bool,
}

pub(super) struct Agent {
    pub id: String,
    pub host: HostId,
    identity: IdentityKey,
    rng: ChaCha8Rng,
    seed: u64,
    pub punch_port: u16,
    overlay: Ipv4Addr,
    phase: Phase,
    classifier: Option<NatClassifier>,
    pub nat_class: NatClass,
    intro_at: Option<SimTime>,
    intro_tries: BTreeMap<String, u8>,
    pub sessions: Vec<LinkSession>,
    pub pings: Vec<PingState>,
    next_seq: u32,
    next_keepalive: Option<SimTime>,
    armed: Option<SimTime>,
    pub errors: Vec<String>,
}

impl Agent {
    pub fn new(id: String, host: HostId, identity: IdentityKey, seed: u64, punch_port: u16, overlay: Ipv4Addr) -> Self {
        Self {
            id,
            host,
            identity,
            rng: ChaCha8Rng::seed_from_u64(derive(seed, "agent-rng")),
            seed,
            punch_port,
            overlay,
            phase: Phase::Idle,
            classifier: None,
            nat_class: NatClass::Unknown,
            intro_at: None,
            intro_tries: BTreeMap::new(),
            sessions: Vec::new(),
            pings: Vec::new(),
            next_seq: 1,
            next_keepalive: None,
            armed: None,
            errors: Vec::new(),
        }
    }

    fn send_control(&self, ctx: &mut Ctx, msg: ControlMessage) {
        ctx.net.send_message(self.host, ctx.coord, msg.to_line().into_bytes());
    }

    fn register(&self, ctx: &mut Ctx, nat: Option<NatClass>) {
        self.send_control(
            ctx,
            ControlMessage::Register {
                node_id: self.id.clone(),
                pubkey_b64: self.identity.public().to_b64(),
                nat,
            },
        );
    }

    pub fn start(&mut self, ctx: &mut Ctx) {
        self.register(ctx, None);
        self.phase = Phase::Registering;
    }

    pub fn on_event(&mut self, ctx: &mut Ctx, ev: HostEvent) {
        match ev {
            HostEvent::Message { payload, .. } => self.on_control(ctx, &payload),
            HostEvent::Datagram {
                local_port,
                from,
                payload,
                ..
            } => self.on_datagram(ctx, local_port, from, &payload),
            HostEvent::Timer { .. } => {
                let now = ctx.net.now();
                if self.armed.is_some_and(|a| a <= now) {
                    self.armed = None;
                }
                if let Some(c) = self.classifier.as_mut() {
                    c.handle_timeout(now.as_duration());
                }
                for s in &mut self.sessions {
                    if let Some(p) = s.punch.as_mut() {
                        p.handle_timeout(now.as_duration());
                    }
                }
            }
        }
        self.poll(ctx);
    }

    fn session_by_sid(&self, sid: SessionId) -> Option<usize> {
        self.sessions.iter().position(|s| s.sid == sid)
    }

    fn session_by_hex(&self, hex_id: &str) -> Option<usize> {
        hex_id.parse().ok().and_then(|sid| self.session_by_sid(sid))
    }

    fn on_control(&mut self, ctx: &mut Ctx, payload: &[u8]) {
        let Ok(msg) = std::str::from_utf8(payload)
            .map_err(|e| e.to_string())
            .and_then(|l| crate::rendezvous::decode_line(l).map_err(|e| e.to_string()))
        else {
            self.errors.push("undecodable control line".into());
            return;
        };
        match msg {
            ControlMessage::Registered { .. } if self.phase == Phase::Registering => {
                let local = SocketAddrV4::new(ctx.net.host_ip(self.host), self.punch_port);
                let cfg = ClassifyConfig {
                    node_id: Some(self.id.clone()),
                    seed: derive(self.seed, "classify"),
                    ..ClassifyConfig::default()
                };
                let mut c = NatClassifier::new(local, ctx.observers, cfg);
                c.start(ctx.net.now().as_duration());
                self.classifier = Some(c);
                self.phase = Phase::Classifying;
            }
            ControlMessage::Introduce {
                session_id_hex,
                peer,
                peer_endpoint,
                role,
                punch,
                peer_pubkey_b64,
                ..
            } => self.on_introduce(ctx, &session_id_hex, peer, peer_endpoint, role, punch, peer_pubkey_b64),
            ControlMessage::RelayOpened { session_id_hex } => {
                if let Some(i) = self.session_by_hex(&session_id_hex) {
                    self.sessions[i].relay_opened = true;
                    self.check_relay_ready(ctx, i);
                }
            }
            ControlMessage::RelayOpen { session_id_hex } => {
                if let Some(i) = self.session_by_hex(&session_id_hex) {
                    self.sessions[i].peer_relay_open = true;
                    if self.sessions[i].ts.state() == SessionState::Punching {
                        self.sessions[i].peer_fallback = true;
                        self.sessions[i].punch = None;
                        self.fallback(ctx, i, None);
                    }
                    self.check_relay_ready(ctx, i);
                }
            }
            ControlMessage::RelayData {
                session_id_hex,
                payload_b64,
            } => {
                let Some(i) = self.session_by_hex(&session_id_hex) else { return };
                let Ok(bytes) = B64.decode(payload_b64) else { return };
                self.sessions[i].peer_relay_open = true;
                self.check_relay_ready(ctx, i);
                if self.sessions[i].is_relayed() {
                    self.on_link_bytes(ctx, i, &bytes);
                }
            }
            ControlMessage::Error { code, detail } => match code.as_str() {
                "no-such-node" => self.intro_at = Some(ctx.net.now() + INTRO_RETRY),
                "identity-conflict" => {
                    self.phase = Phase::Dead;
                    self.errors.push(format!("{code}: {detail}"));
                }
                _ => self.errors.push(format!("{code}: {detail}")),
            },
            _ => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_introduce(
        &mut self,
        ctx: &mut Ctx,
        sid_hex: &str,
        peer: String,
        peer_endpoint: Endpoint,
        role: Role,
        params: PunchParams,
        peer_pubkey_b64: Option<String>,
    ) {
        let Ok(sid) = sid_hex.parse::<SessionId>() else { return };
        if self.session_by_sid(sid).is_some() {
            return;
        }
        let Some(link) = ctx
            .plan
            .links
            .iter()
            .find(|l| l.touches(&self.id) && l.other(&self.id) == Some(peer.as_str()))
        else {
            self.errors.push(format!("introduced to unplanned peer {peer}"));
            return;
        };
        let now = ctx.net.now();
        let mut ts = TraversalSession::new();
        ts.begin_observing().expect("fresh session");
        ts.begin_exchanging(sid, role).expect("observing");
        let marker = format!("BDMESH-MARKER {}->{} {}", self.id, peer, sid).into_bytes();
        let mut s = LinkSession {
            peer,
            sid,
            role,
            ts,
            punch: None,
            ports: vec![self.punch_port],
            encrypted: link.encrypted,
            transport: Transport::None,
            relay_open_sent: false,
            relay_opened: false,
            peer_relay_open: false,
            peer_fallback: false,
            peer_key: peer_pubkey_b64.as_deref().and_then(|k| IdentityPublic::from_b64(k).ok()),
            hs: None,
            missing_key: false,
            codec: None,
            marker_sent: marker,
            marker_received: None,
            marker_acked: false,
            marker_tries: 0,
            marker_next: SimTime::ZERO,
            bulk_rx: BTreeMap::new(),
            bulk_ok: None,
            rejected_frames: 0,
        };
        let cfg = params.to_config(derive(self.seed, sid_hex));
        let peer_ep: SocketAddrV4 = peer_endpoint.into();
        let machine = match role {
            Role::Relay => None,
            Role::Direct => Some(Ok(Punch::Direct(DirectPunch::new(sid, peer_ep, cfg.seed)))),
            Role::Prober => Some(BirthdayProber::new(sid, *peer_ep.ip(), cfg).map(Punch::Prober)),
            Role::Opener => Some(BirthdayOpener::new(sid, peer_ep, cfg).map(|mut o| {
                s.ports.clear();
                for _ in 0..cfg.open_ports {
                    match ctx.net.bind(self.host, None) {
                        Ok(p) => s.ports.push(p),
                        Err(_) => break,
                    }
                }
                o.sockets_unavailable(now.as_duration(), s.ports.len());
                Punch::Opener(o)
            })),
        };
        self.sessions.push(s);
        let i = self.sessions.len() - 1;
        match machine {
            None => self.fallback(ctx, i, None),
            Some(Err(e)) => {
                self.errors.push(format!("punch setup for {sid}: {e}"));
                self.fallback(ctx, i, Some(FailReason::Resources));
            }
            Some(Ok(mut m)) => {
                self.sessions[i].ts.begin_punching().expect("exchanging");
                m.start(now.as_duration());
                self.sessions[i].punch = Some(m);
            }
        }
    }

    fn fallback(&mut self, ctx: &mut Ctx, i: usize, reason: Option<FailReason>) {
        let s = &mut self.sessions[i];
        let stats = s.punch.as_ref().map(|p| p.stats()).unwrap_or(s.ts.stats());
        if s.ts.fallback(reason, stats).is_err() {
            return;
        }
        if !s.relay_open_sent {
            s.relay_open_sent = true;
            let msg = ControlMessage::RelayOpen {
                session_id_hex: s.sid.to_hex(),
            };
            self.send_control(ctx, msg);
        }
    }

    fn check_relay_ready(&mut self, ctx: &mut Ctx, i: usize) {
        let s = &mut self.sessions[i];
        if s.ts.state() == SessionState::EstablishedRelayed
            && s.relay_opened
            && s.peer_relay_open
            && s.transport == Transport::None
        {
            s.transport = Transport::Relay;
            self.link_up(ctx, i);
        }
    }

    fn on_datagram(&mut self, ctx: &mut Ctx, local_port: u16, from: SocketAddrV4, payload: &[u8]) {
        let now = ctx.net.now().as_duration();
        // Sealed frames can start with '{' too, so go by the sender.
        if local_port == self.punch_port && ctx.observers.contains(&from) {
            if let Some(c) = self.classifier.as_mut() {
                c.handle_datagram(from, payload);
            }
            return;
        }
        if let Some(pkt) = ProbePacket::decode(payload) {
            if let Some(i) = self.session_by_sid(pkt.session) {
                let s = &mut self.sessions[i];
                if let (Some(p), Some(socket)) = (s.punch.as_mut(), s.ports.iter().position(|x| *x == local_port)) {
                    p.handle_datagram(now, socket, from, payload);
                }
            }
            return;
        }
        // Anything else on an opener socket from the recorded peer confirms it.
        let owner = self
            .sessions
            .iter()
            .position(|s| s.role == Role::Opener && s.ports.contains(&local_port) && s.punch.is_some());
        if let Some(i) = owner {
            let s = &mut self.sessions[i];
            if let (Some(Punch::Opener(o)), Some(socket)) =
                (s.punch.as_mut(), s.ports.iter().position(|x| *x == local_port))
            {
                o.implicit_confirm(now, socket, from);
            }
            self.process_punches(ctx);
        }
        let target = if HandshakeKind::peek(payload).is_some() && payload.len() >= 16 {
            let sid = SessionId::from_bytes(payload[8..16].try_into().expect("8 bytes"));
            self.session_by_sid(sid)
        } else {
            self.sessions.iter().position(|s| {
                s.transport
                    == Transport::Direct {
                        local_port,
                        remote: from,
                    }
            })
        };
        if let Some(i) = target {
            if matches!(self.sessions[i].transport, Transport::Direct { .. }) {
                self.on_link_bytes(ctx, i, payload);
            }
        }
    }

    fn process_punches(&mut self, ctx: &mut Ctx) {
        for i in 0..self.sessions.len() {
            let s = &mut self.sessions[i];
            let Some(p) = s.punch.as_mut() else { continue };
            while let Some(t) = p.poll_transmit() {
                let port = s.ports[t.socket];
                let _ = ctx.net.send(self.host, port, t.dst, t.payload);
            }
            if s.ts.state() != SessionState::Punching {
                continue;
            }
            match p.outcome() {
                Some(PunchOutcome::Established { socket, peer }) => {
                    let local_port = s.ports[socket];
                    let path = DirectPath {
                        local: SocketAddrV4::new(ctx.net.host_ip(self.host), local_port),
                        remote: peer,
                    };
                    s.ts.establish_direct(path, p.stats()).expect("punching");
                    s.transport = Transport::Direct {
                        local_port,
                        remote: peer,
                    };
                    self.link_up(ctx, i);
                }
                Some(PunchOutcome::Failed(reason)) => self.fallback(ctx, i, Some(reason)),
                None => {}
            }
        }
    }

    fn is_initiator(&self, s: &LinkSession) -> bool {
        match (s.transport, s.role) {
            (Transport::Direct { .. }, Role::Prober) => true,
            (Transport::Direct { .. }, Role::Opener) => false,
            _ => self.id < s.peer,
        }
    }

    fn link_up(&mut self, ctx: &mut Ctx, i: usize) {
        let now = ctx.net.now().as_duration();
        if !self.sessions[i].encrypted {
            self.sessions[i].codec = Some(LinkCodec::Plain);
            self.start_app(ctx, i);
            return;
        }
        if self.sessions[i].hs.is_some() {
            return;
        }
        let Some(peer_key) = self.sessions[i].peer_key else {
            self.sessions[i].missing_key = true;
            return;
        };
        let s = &self.sessions[i];
        let relayed = s.is_relayed();
        let (hs, hello) = if self.is_initiator(s) {
            let (hs, hello) = LinkHandshake::initiate(&self.identity, peer_key, s.sid, now, &mut self.rng);
            (hs, Some(hello))
        } else {
            (LinkHandshake::responder(&self.identity, peer_key, s.sid), None)
        };
        self.sessions[i].hs = Some(if relayed { hs.reliable() } else { hs });
        if let Some(h) = hello {
            self.send_link(ctx, i, h);
        }
    }

    fn send_link(&self, ctx: &mut Ctx, i: usize, bytes: Vec<u8>) {
        let s = &self.sessions[i];
        match s.transport {
            Transport::Direct { local_port, remote } => {
                let _ = ctx.net.send(self.host, local_port, remote, bytes);
            }
            Transport::Relay => self.send_control(
                ctx,
                ControlMessage::RelayData {
                    session_id_hex: s.sid.to_hex(),
                    payload_b64: B64.encode(bytes),
                },
            ),
            Transport::None => {}
        }
    }

    fn on_link_bytes(&mut self, ctx: &mut Ctx, i: usize, bytes: &[u8]) {
        if HandshakeKind::peek(bytes).is_some() {
            self.on_handshake(ctx, i, bytes);
            return;
        }
        let s = &mut self.sessions[i];
        let Some(codec) = s.codec.as_mut() else {
            s.rejected_frames += 1;
            return;
        };
        let plain = match codec.open(bytes) {
            Ok(p) => p,
            Err(_) => {
                s.rejected_frames += 1;
                return;
            }
        };
        if let Some(msg) = AppMessage::decode(&plain) {
            self.on_app(ctx, i, msg);
        }
    }

    fn on_handshake(&mut self, ctx: &mut Ctx, i: usize, bytes: &[u8]) {
        let now = ctx.net.now().as_duration();
        let Some(hs) = self.sessions[i].hs.as_mut() else { return };
        let step = hs.handle_message(now, bytes, &mut self.rng);
        if let Some(b) = step.send {
            self.send_link(ctx, i, b);
        }
        if let Some(k) = step.keys {
            self.sessions[i].codec = Some(LinkCodec::Secure(Box::new(k)));
            self.start_app(ctx, i);
        }
    }

    fn seal_and_send(&mut self, ctx: &mut Ctx, i: usize, msg: &AppMessage) -> bool {
        let Some(codec) = self.sessions[i].codec.as_mut() else { return false };
        match codec.seal(&msg.encode()) {
            Ok(wire) => {
                self.send_link(ctx, i, wire);
                true
            }
            Err(_) => false,
        }
    }

    /// Send towards an overlay address; false when there is no usable hop.
    fn route_send(&mut self, ctx: &mut Ctx, dst: Ipv4Addr, msg: &AppMessage) -> bool {
        let Ok(NextHop::Peer(hop)) = route_lookup(ctx.plan, &self.id, dst) else { return false };
        let Some(i) = self.sessions.iter().position(|s| s.peer == hop && s.ready()) else { return false };
        self.seal_and_send(ctx, i, msg)
    }

    /// The marker rides on lossy paths too, so it is repeated until acked.
    fn send_marker(&mut self, ctx: &mut Ctx, i: usize) {
        let now = ctx.net.now();
        let s = &mut self.sessions[i];
        s.marker_tries += 1;
        s.marker_next = now + RETX;
        let marker = AppMessage::Marker(s.marker_sent.clone());
        self.seal_and_send(ctx, i, &marker);
    }

    fn start_app(&mut self, ctx: &mut Ctx, i: usize) {
        let now = ctx.net.now();
        self.send_marker(ctx, i);
        let peer = self.sessions[i].peer.clone();
        let mut targets = Vec::new();
        if let Some(node) = ctx.plan.node(&peer) {
            targets.push(node.overlay_addr);
            for c in &node.subnets {
                targets.push(Ipv4Addr::from(u32::from(c.addr()) + u32::from(c.prefix() < 32)));
            }
        }
        for dst in targets {
            if self.pings.iter().all(|p| p.dst != dst) {
                self.pings.push(PingState {
                    dst,
                    seq: self.next_seq,
                    tries: 0,
                    next: now,
                    ok: false,
                });
                self.next_seq += 1;
            }
        }
        if self.sessions[i].is_relayed() && ctx.bulk_bytes > 0 {
            let data = bulk_payload(ctx.bulk_bytes, derive(self.seed, &peer));
            let total = data.len().div_ceil(BULK_CHUNK) as u16;
            for (index, chunk) in data.chunks(BULK_CHUNK).enumerate() {
                let msg = AppMessage::BulkChunk {
                    index: index as u16,
                    total,
                    data: chunk.to_vec(),
                };
                self.seal_and_send(ctx, i, &msg);
            }
            let end = AppMessage::BulkEnd {
                len: data.len() as u32,
                sha256: Sha256::digest(&data).into(),
            };
            self.seal_and_send(ctx, i, &end);
        }
    }

    fn on_app(&mut self, ctx: &mut Ctx, i: usize, msg: AppMessage) {
        let local = |ctx: &Ctx, id: &str, dst| route_lookup(ctx.plan, id, dst) == Ok(NextHop::Local);
        match msg {
            AppMessage::Marker(m) => {
                self.sessions[i].marker_received = Some(m);
                self.seal_and_send(ctx, i, &AppMessage::MarkerAck);
            }
            AppMessage::MarkerAck => self.sessions[i].marker_acked = true,
            AppMessage::Ping { src, dst, seq, ttl } => {
                if local(ctx, &self.id, dst) {
                    let pong = AppMessage::Pong {
                        src: dst,
                        dst: src,
                        seq,
                        ttl: 8,
                    };
                    self.route_send(ctx, src, &pong);
                } else if ttl > 0 {
                    self.route_send(ctx, dst, &AppMessage::Ping { src, dst, seq, ttl: ttl - 1 });
                }
            }
            AppMessage::Pong { src, dst, seq, ttl } => {
                if local(ctx, &self.id, dst) {
                    if let Some(p) = self.pings.iter_mut().find(|p| p.seq == seq && p.dst == src) {
                        p.ok = true;
                    }
                } else if ttl > 0 {
                    self.route_send(ctx, dst, &AppMessage::Pong { src, dst, seq, ttl: ttl - 1 });
                }
            }
            AppMessage::BulkChunk { index, data, .. } => {
                self.sessions[i].bulk_rx.insert(index, data);
            }
            AppMessage::BulkEnd { len, sha256 } => {
                let s = &mut self.sessions[i];
                let data: Vec<u8> = s.bulk_rx.values().flatten().copied().collect();
                s.bulk_ok = Some(data.len() == len as usize && <[u8; 32]>::from(Sha256::digest(&data)) == sha256);
            }
        }
    }

    fn poll(&mut self, ctx: &mut Ctx) {
        let now = ctx.net.now();
        if let Some(c) = self.classifier.as_mut() {
            while let Some(t) = c.poll_transmit() {
                let _ = ctx.net.send(self.host, self.punch_port, t.dst, t.payload);
            }
            if let (Some(class), Phase::Classifying) = (c.outcome(), self.phase) {
                self.nat_class = class;
                self.classifier = None;
                self.register(ctx, Some(class));
                self.phase = Phase::Ready;
                self.intro_at = Some(now.max(INTRO_AT));
                self.next_keepalive = Some(now + KEEPALIVE);
            }
        }
        self.process_punches(ctx);

        if self.phase == Phase::Ready && self.intro_at.is_some_and(|t| t <= now) {
            self.intro_at = None;
            let wanted: Vec<String> = ctx
                .plan
                .links
                .iter()
                .filter(|l| l.a == self.id)
                .map(|l| l.b.clone())
                .filter(|b| self.sessions.iter().all(|s| &s.peer != b))
                .collect();
            for peer in wanted {
                let tries = self.intro_tries.entry(peer.clone()).or_default();
                if *tries < INTRO_TRIES {
                    *tries += 1;
                    self.send_control(ctx, ControlMessage::IntroduceRequest { peer });
                }
            }
        }

        for i in 0..self.sessions.len() {
            let resend = self.sessions[i].hs.as_mut().and_then(|h| h.handle_timeout(now.as_duration()));
            if let Some(b) = resend {
                self.send_link(ctx, i, b);
            }
        }

        for i in 0..self.sessions.len() {
            if self.sessions[i].marker_due().is_some_and(|t| t <= now) {
                self.send_marker(ctx, i);
            }
        }

        for k in 0..self.pings.len() {
            let p = &self.pings[k];
            if p.ok || p.tries >= PING_TRIES || p.next > now {
                continue;
            }
            let (dst, seq) = (p.dst, p.seq);
            let msg = AppMessage::Ping {
                src: self.overlay,
                dst,
                seq,
                ttl: 8,
            };
            let p = &mut self.pings[k];
            p.tries += 1;
            p.next = now + RETX;
            self.route_send(ctx, dst, &msg);
        }

        if let Some(t) = self.next_keepalive.filter(|t| *t <= now) {
            self.next_keepalive = Some(t + KEEPALIVE);
            let nonce = now.as_micros();
            self.send_control(ctx, ControlMessage::Ping { nonce });
        }

        self.rearm(ctx);
    }

    fn rearm(&mut self, ctx: &mut Ctx) {
        let as_sim = |d: Duration| SimTime::from_duration(d);
        let mut next: Vec<SimTime> = Vec::new();
        if let Some(c) = &self.classifier {
            next.extend(c.poll_timeout().map(as_sim));
        }
        for s in &self.sessions {
            if let Some(p) = &s.punch {
                next.extend(p.poll_timeout().map(as_sim));
            }
            if let Some(h) = &s.hs {
                next.extend(h.poll_timeout().map(as_sim));
            }
            next.extend(s.marker_due());
        }
        if self.phase == Phase::Ready {
            next.extend(self.intro_at);
            next.extend(self.next_keepalive);
        }
        next.extend(
            self.pings
                .iter()
                .filter(|p| !p.ok && p.tries < PING_TRIES)
                .map(|p| p.next),
        );
        if let Some(t) = next.into_iter().min() {
            let t = t.max(ctx.net.now());
            if self.armed.map_or(true, |a| t < a || a < ctx.net.now()) {
                ctx.net.set_timer(self.host, t, TAG_WAKE);
                self.armed = Some(t);
            }
        }
    }

    pub fn session_with(&self, peer: &str) -> Option<&LinkSession> {
        self.sessions.iter().find(|s| s.peer == peer)
    }
}
