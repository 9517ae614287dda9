use std::fs;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, TcpStream, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use bdmesh::rendezvous::{decode_line, ControlMessage, Endpoint, PunchParams};
use bdmesh::secure::{HandshakeKind, IdentityKey, IdentityPublic, LinkCodec, LinkHandshake};
use bdmesh::traversal::{
    BirthdayOpener, BirthdayProber, ClassifyConfig, DirectPath, DirectPunch, NatClass, NatClassifier, ProbePacket,
    Punch, PunchMachine, PunchOutcome, Role, SessionId, SessionState, TraversalSession,
};
use bdmesh::world::app::AppMessage;
use log::{debug, info, warn};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ServiceError;

const TICK: Duration = Duration::from_millis(2);
const RETRY: Duration = Duration::from_millis(500);
const ECHO_SENDS: u32 = 10;
const INTRO_SENDS: u32 = 20;
const INTRO_DELAY: Duration = Duration::from_secs(1);
const KEEPALIVE: Duration = Duration::from_secs(20);
const ECHO_REQUEST: &str = "ECHO ";
const ECHO_REPLY: &str = "ECHO-REPLY ";

#[derive(Debug, Clone)]
pub struct NodeOptions {
    pub coord: SocketAddrV4,
    pub coord2: SocketAddrV4,
    pub id: String,
    pub key_file: PathBuf,
    /// Ask the coordinator for an introduction to this node.
    pub peer: Option<String>,
    /// Text to bounce off the peer once the link is up.
    pub echo: Option<String>,
    /// Keep running this long. Without it a node with a peer exits once
    /// the link (and echo) is done and a node without one runs until
    /// shutdown.
    pub serve_for: Option<Duration>,
    /// How long a node with a peer waits for its link.
    pub timeout: Duration,
    /// Skip punching and go straight to the relay.
    pub force_relay: bool,
    pub connect_attempts: u32,
    pub retry_delay: Duration,
}

impl NodeOptions {
    pub fn new(coord: SocketAddrV4, id: impl Into<String>, key_file: impl Into<PathBuf>) -> Self {
        Self {
            coord,
            coord2: SocketAddrV4::new(*coord.ip(), coord.port().wrapping_add(1)),
            id: id.into(),
            key_file: key_file.into(),
            peer: None,
            echo: None,
            serve_for: None,
            timeout: Duration::from_secs(30),
            force_relay: false,
            connect_attempts: 3,
            retry_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkSummary {
    pub peer: String,
    pub role: Role,
    pub state: SessionState,
    pub path: &'static str,
    pub encrypted: bool,
    pub echo: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSummary {
    pub node_id: String,
    pub observed: Option<Endpoint>,
    pub nat: NatClass,
    pub links: Vec<LinkSummary>,
}

/// Read a base64 Ed25519 secret, or create one (mode 0600) if the file is
/// missing.
pub fn load_or_create_key(path: &Path) -> Result<IdentityKey, ServiceError> {
    match fs::read_to_string(path) {
        Ok(text) => {
            let bytes = B64
                .decode(text.trim())
                .map_err(|e| ServiceError::Invalid(format!("key file {}: {e}", path.display())))?;
            let secret: [u8; 32] = bytes
                .try_into()
                .map_err(|_| ServiceError::Invalid(format!("key file {}: expected 32 bytes", path.display())))?;
            Ok(IdentityKey::from_secret_bytes(secret))
        }
        Err(e) if e.kind() == ErrorKind::NotFound => {
            let key = IdentityKey::generate(&mut OsRng);
            let mut f = fs::File::create(path)?;
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                f.set_permissions(fs::Permissions::from_mode(0o600))?;
            }
            writeln!(f, "{}", B64.encode(key.secret_bytes()))?;
            info!("wrote new identity to {}", path.display());
            Ok(key)
        }
        Err(e) => Err(e.into()),
    }
}

fn say(line: String) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Direct { sock: usize, remote: SocketAddrV4 },
    Relay,
}

struct Link {
    peer: String,
    peer_ep: SocketAddrV4,
    sid: SessionId,
    role: Role,
    ts: TraversalSession,
    punch: Option<Punch>,
    socks: Vec<usize>,
    path: Option<Route>,
    relay_open_sent: bool,
    relay_opened: bool,
    peer_relay_open: bool,
    peer_key: Option<IdentityPublic>,
    hs: Option<LinkHandshake>,
    codec: Option<LinkCodec>,
    echo_sends: u32,
    echo_next: Duration,
    echo_reply: Option<String>,
}

impl Link {
    fn summary(&self) -> LinkSummary {
        LinkSummary {
            peer: self.peer.clone(),
            role: self.role,
            state: self.ts.state(),
            path: match self.path {
                Some(Route::Direct { .. }) => "direct",
                Some(Route::Relay) => "relayed",
                None => "none",
            },
            encrypted: self.codec.as_ref().is_some_and(LinkCodec::is_encrypted),
            echo: self.echo_reply.clone(),
        }
    }
}

struct Node<'a> {
    opts: &'a NodeOptions,
    identity: IdentityKey,
    rng: ChaCha8Rng,
    control: TcpStream,
    socks: Vec<UdpSocket>,
    local_ip: Ipv4Addr,
    started: Instant,
    classifier: Option<NatClassifier>,
    nat: NatClass,
    classified: bool,
    observed: Option<Endpoint>,
    intro_sends: u32,
    intro_next: Option<Duration>,
    links: Vec<Link>,
    next_keepalive: Duration,
}

fn connect(opts: &NodeOptions) -> Result<TcpStream, ServiceError> {
    for attempt in 1..=opts.connect_attempts.max(1) {
        match TcpStream::connect_timeout(&SocketAddr::V4(opts.coord), Duration::from_secs(1)) {
            Ok(s) => return Ok(s),
            Err(e) => {
                warn!("connect to {} failed (attempt {attempt}): {e}", opts.coord);
                if attempt < opts.connect_attempts {
                    thread::sleep(opts.retry_delay);
                }
            }
        }
    }
    Err(ServiceError::CoordUnreachable(opts.coord.to_string()))
}

fn local_ip_towards(dst: SocketAddrV4) -> io::Result<Ipv4Addr> {
    let probe = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?;
    probe.connect(dst)?;
    match probe.local_addr()? {
        SocketAddr::V4(a) => Ok(*a.ip()),
        SocketAddr::V6(_) => Err(io::Error::other("no IPv4 route to the coordinator")),
    }
}

fn udp_socket(ip: Ipv4Addr) -> io::Result<UdpSocket> {
    let s = UdpSocket::bind((ip, 0))?;
    s.set_nonblocking(true)?;
    Ok(s)
}

/// Run a node until its work is done, `timeout` passes or `shutdown` is set.
pub fn run_node(opts: &NodeOptions, shutdown: Arc<AtomicBool>) -> Result<NodeSummary, ServiceError> {
    if opts.id.is_empty() || opts.id.len() > 64 || opts.id.contains(char::is_whitespace) {
        return Err(ServiceError::Invalid("node ids are 1-64 characters without whitespace".into()));
    }
    let identity = load_or_create_key(&opts.key_file)?;
    let control = connect(opts)?;
    let local_ip = local_ip_towards(opts.coord)?;
    let main = udp_socket(local_ip).map_err(|source| ServiceError::Bind {
        addr: format!("{local_ip}:0"),
        source,
    })?;
    let rx = spawn_reader(control.try_clone()?);
    let mut node = Node {
        opts,
        identity,
        rng: ChaCha8Rng::seed_from_u64(OsRng.next_u64()),
        control,
        socks: vec![main],
        local_ip,
        started: Instant::now(),
        classifier: None,
        nat: NatClass::Unknown,
        classified: false,
        observed: None,
        intro_sends: 0,
        intro_next: None,
        links: Vec::new(),
        next_keepalive: KEEPALIVE,
    };
    node.register()?;
    node.run(&rx, &shutdown)?;
    Ok(NodeSummary {
        node_id: opts.id.clone(),
        observed: node.observed,
        nat: node.nat,
        links: node.links.iter().map(Link::summary).collect(),
    })
}

fn spawn_reader(stream: TcpStream) -> Receiver<Option<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            match line {
                Ok(l) => {
                    if tx.send(Some(l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(None);
    });
    rx
}

impl Node<'_> {
    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    fn send_control(&mut self, msg: ControlMessage) -> Result<(), ServiceError> {
        self.control.write_all(msg.to_line().as_bytes())?;
        Ok(())
    }

    fn register(&mut self) -> Result<(), ServiceError> {
        let nat = self.classified.then_some(self.nat);
        self.send_control(ControlMessage::Register {
            node_id: self.opts.id.clone(),
            pubkey_b64: self.identity.public().to_b64(),
            nat,
        })
    }

    fn done(&self) -> bool {
        let Some(peer) = &self.opts.peer else { return false };
        self.links.iter().any(|l| {
            &l.peer == peer
                && l.codec.is_some()
                && (self.opts.echo.is_none() || l.echo_reply.is_some())
        })
    }

    fn run(&mut self, rx: &Receiver<Option<String>>, shutdown: &AtomicBool) -> Result<(), ServiceError> {
        let mut buf = [0u8; 2048];
        loop {
            if shutdown.load(Ordering::Relaxed) {
                return Ok(());
            }
            loop {
                match rx.try_recv() {
                    Ok(Some(line)) => self.on_line(&line)?,
                    Ok(None) | Err(TryRecvError::Disconnected) => {
                        return if self.done() {
                            Ok(())
                        } else {
                            Err(ServiceError::Failed("coordinator closed the control channel".into()))
                        };
                    }
                    Err(TryRecvError::Empty) => break,
                }
            }
            for i in 0..self.socks.len() {
                loop {
                    match self.socks[i].recv_from(&mut buf) {
                        Ok((n, SocketAddr::V4(from))) => {
                            let data = buf[..n].to_vec();
                            self.on_datagram(i, from, &data)?;
                        }
                        Ok(_) => {}
                        Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                        Err(e) => {
                            debug!("recv on socket {i}: {e}");
                            break;
                        }
                    }
                }
            }
            self.tick()?;
            let now = self.now();
            match self.opts.serve_for {
                Some(limit) if now >= limit => return Ok(()),
                None if self.done() => return Ok(()),
                _ => {}
            }
            if self.opts.peer.is_some() && !self.done() && now >= self.opts.timeout {
                return Err(ServiceError::Failed(format!(
                    "no working link to {} after {:?}",
                    self.opts.peer.as_deref().unwrap_or_default(),
                    self.opts.timeout
                )));
            }
            thread::sleep(TICK);
        }
    }

    fn link_by_hex(&self, hex_id: &str) -> Option<usize> {
        let sid: SessionId = hex_id.parse().ok()?;
        self.links.iter().position(|l| l.sid == sid)
    }

    fn on_line(&mut self, line: &str) -> Result<(), ServiceError> {
        let msg = match decode_line(line) {
            Ok(m) => m,
            Err(e) => {
                warn!("bad control line: {e}");
                return Ok(());
            }
        };
        debug!("control <- {}", msg.type_name());
        match msg {
            ControlMessage::Registered { observed, .. } => {
                if self.observed.is_none() {
                    say(format!("registered {} observed={observed}", self.opts.id));
                }
                self.observed = Some(observed);
                if self.classifier.is_none() && !self.classified {
                    let local = self.socks[0].local_addr()?;
                    let SocketAddr::V4(local) = local else { unreachable!("bound to IPv4") };
                    let cfg = ClassifyConfig {
                        node_id: Some(self.opts.id.clone()),
                        seed: self.rng.next_u64(),
                        ..ClassifyConfig::default()
                    };
                    let mut c = NatClassifier::new(local, [self.opts.coord, self.opts.coord2], cfg);
                    c.start(self.now());
                    self.classifier = Some(c);
                }
            }
            ControlMessage::Introduce {
                session_id_hex,
                peer,
                peer_endpoint,
                role,
                punch,
                peer_pubkey_b64,
                ..
            } => self.on_introduce(&session_id_hex, peer, peer_endpoint.into(), role, punch, peer_pubkey_b64)?,
            ControlMessage::RelayOpened { session_id_hex } => {
                if let Some(i) = self.link_by_hex(&session_id_hex) {
                    self.links[i].relay_opened = true;
                    self.check_relay_ready(i)?;
                }
            }
            ControlMessage::RelayOpen { session_id_hex } => {
                if let Some(i) = self.link_by_hex(&session_id_hex) {
                    self.links[i].peer_relay_open = true;
                    if self.links[i].ts.state() == SessionState::Punching {
                        self.links[i].punch = None;
                        self.fallback(i, None)?;
                    }
                    self.check_relay_ready(i)?;
                }
            }
            ControlMessage::RelayData {
                session_id_hex,
                payload_b64,
            } => {
                let Some(i) = self.link_by_hex(&session_id_hex) else { return Ok(()) };
                let Ok(bytes) = B64.decode(payload_b64) else { return Ok(()) };
                self.links[i].peer_relay_open = true;
                self.check_relay_ready(i)?;
                if self.links[i].path == Some(Route::Relay) {
                    self.on_link_bytes(i, &bytes)?;
                }
            }
            ControlMessage::Error { code, detail } => match code.as_str() {
                "identity-conflict" => return Err(ServiceError::IdentityConflict(detail)),
                "no-such-node" if self.intro_sends < INTRO_SENDS => {
                    debug!("peer not registered yet: {detail}");
                    self.intro_next = Some(self.now() + Duration::from_secs(1));
                }
                _ => warn!("coordinator error {code}: {detail}"),
            },
            _ => {}
        }
        Ok(())
    }

    fn on_introduce(
        &mut self,
        sid_hex: &str,
        peer: String,
        peer_ep: SocketAddrV4,
        role: Role,
        params: PunchParams,
        peer_key: Option<String>,
    ) -> Result<(), ServiceError> {
        let Ok(sid) = sid_hex.parse::<SessionId>() else { return Ok(()) };
        let peer_key = peer_key.as_deref().and_then(|k| IdentityPublic::from_b64(k).ok());
        // A peer that comes back with a new endpoint or key has restarted, so
        // its old session is dead. Anything else is a duplicate.
        let replace = match self.links.iter().position(|l| l.sid == sid || l.peer == peer) {
            Some(i) if self.links[i].sid != sid && (self.links[i].peer_ep != peer_ep || self.links[i].peer_key != peer_key) => {
                info!("{peer} restarted; dropping session {}", self.links[i].sid);
                Some(i)
            }
            Some(_) => return Ok(()),
            None => None,
        };
        say(format!("introduced {peer} role={role} session={sid}"));
        let now = self.now();
        let mut ts = TraversalSession::new();
        ts.begin_observing().expect("fresh session");
        ts.begin_exchanging(sid, role).expect("observing");
        let mut link = Link {
            peer,
            peer_ep,
            sid,
            role,
            ts,
            punch: None,
            socks: vec![0],
            path: None,
            relay_open_sent: false,
            relay_opened: false,
            peer_relay_open: false,
            peer_key,
            hs: None,
            codec: None,
            echo_sends: 0,
            echo_next: now,
            echo_reply: None,
        };
        let cfg = params.to_config(self.rng.next_u64());
        let machine = match role {
            _ if self.opts.force_relay => None,
            Role::Relay => None,
            Role::Direct => Some(Ok(Punch::Direct(DirectPunch::new(sid, peer_ep, cfg.seed)))),
            Role::Prober => Some(BirthdayProber::new(sid, *peer_ep.ip(), cfg).map(Punch::Prober)),
            Role::Opener => Some(BirthdayOpener::new(sid, peer_ep, cfg).map(|mut o| {
                link.socks.clear();
                for _ in 0..cfg.open_ports {
                    match udp_socket(self.local_ip) {
                        Ok(s) => {
                            self.socks.push(s);
                            link.socks.push(self.socks.len() - 1);
                        }
                        Err(e) => {
                            warn!("opened only {} sockets: {e}", link.socks.len());
                            break;
                        }
                    }
                }
                o.sockets_unavailable(now, link.socks.len());
                Punch::Opener(o)
            })),
        };
        let i = match replace {
            Some(i) => {
                self.links[i] = link;
                i
            }
            None => {
                self.links.push(link);
                self.links.len() - 1
            }
        };
        match machine {
            None => self.fallback(i, None)?,
            Some(Err(e)) => {
                warn!("cannot punch: {e}");
                self.fallback(i, None)?;
            }
            Some(Ok(mut m)) => {
                self.links[i].ts.begin_punching().expect("exchanging");
                m.start(now);
                self.links[i].punch = Some(m);
            }
        }
        Ok(())
    }

    fn fallback(&mut self, i: usize, reason: Option<bdmesh::traversal::FailReason>) -> Result<(), ServiceError> {
        let l = &mut self.links[i];
        let stats = l.punch.as_ref().map(|p| p.stats()).unwrap_or(l.ts.stats());
        if l.ts.fallback(reason, stats).is_err() || l.relay_open_sent {
            return Ok(());
        }
        l.relay_open_sent = true;
        let msg = ControlMessage::RelayOpen {
            session_id_hex: l.sid.to_hex(),
        };
        self.send_control(msg)
    }

    fn check_relay_ready(&mut self, i: usize) -> Result<(), ServiceError> {
        let l = &mut self.links[i];
        if l.ts.state() == SessionState::EstablishedRelayed && l.relay_opened && l.peer_relay_open && l.path.is_none() {
            l.path = Some(Route::Relay);
            self.link_up(i)?;
        }
        Ok(())
    }

    fn on_datagram(&mut self, sock: usize, from: SocketAddrV4, data: &[u8]) -> Result<(), ServiceError> {
        let now = self.now();
        // Sealed frames can start with '{' too, so go by the sender.
        if sock == 0 && (from == self.opts.coord || from == self.opts.coord2) {
            if let Some(c) = self.classifier.as_mut() {
                c.handle_datagram(from, data);
            }
            return Ok(());
        }
        if let Some(pkt) = ProbePacket::decode(data) {
            if let Some(l) = self.links.iter_mut().find(|l| l.sid == pkt.session) {
                if let (Some(p), Some(idx)) = (l.punch.as_mut(), l.socks.iter().position(|s| *s == sock)) {
                    p.handle_datagram(now, idx, from, data);
                }
            }
            return self.process_punches();
        }
        if let Some(l) = self
            .links
            .iter_mut()
            .find(|l| l.role == Role::Opener && l.punch.is_some() && l.socks.contains(&sock))
        {
            let idx = l.socks.iter().position(|s| *s == sock).expect("owned socket");
            if let Some(Punch::Opener(o)) = l.punch.as_mut() {
                o.implicit_confirm(now, idx, from);
            }
            self.process_punches()?;
        }
        let target = if HandshakeKind::peek(data).is_some() && data.len() >= 16 {
            let sid = SessionId::from_bytes(data[8..16].try_into().expect("8 bytes"));
            self.links.iter().position(|l| l.sid == sid)
        } else {
            self.links
                .iter()
                .position(|l| l.path == Some(Route::Direct { sock, remote: from }))
        };
        match target {
            Some(i) if matches!(self.links[i].path, Some(Route::Direct { .. })) => self.on_link_bytes(i, data),
            _ => Ok(()),
        }
    }

    fn process_punches(&mut self) -> Result<(), ServiceError> {
        for i in 0..self.links.len() {
            let l = &mut self.links[i];
            let Some(p) = l.punch.as_mut() else { continue };
            while let Some(t) = p.poll_transmit() {
                if let Err(e) = self.socks[l.socks[t.socket]].send_to(&t.payload, t.dst) {
                    debug!("punch send to {}: {e}", t.dst);
                }
            }
            if l.ts.state() != SessionState::Punching {
                continue;
            }
            match p.outcome() {
                Some(PunchOutcome::Established { socket, peer }) => {
                    let sock = l.socks[socket];
                    let local = match self.socks[sock].local_addr()? {
                        SocketAddr::V4(a) => a,
                        SocketAddr::V6(_) => unreachable!("bound to IPv4"),
                    };
                    l.ts.establish_direct(DirectPath { local, remote: peer }, p.stats())
                        .expect("punching");
                    l.path = Some(Route::Direct { sock, remote: peer });
                    self.link_up(i)?;
                }
                Some(PunchOutcome::Failed(r)) => {
                    info!("punch to {} failed ({r}), falling back to the relay", l.peer);
                    self.fallback(i, Some(r))?;
                }
                None => {}
            }
        }
        Ok(())
    }

    fn send_link(&mut self, i: usize, bytes: Vec<u8>) -> Result<(), ServiceError> {
        match self.links[i].path {
            Some(Route::Direct { sock, remote }) => {
                if let Err(e) = self.socks[sock].send_to(&bytes, remote) {
                    debug!("send to {remote}: {e}");
                }
                Ok(())
            }
            Some(Route::Relay) => {
                let msg = ControlMessage::RelayData {
                    session_id_hex: self.links[i].sid.to_hex(),
                    payload_b64: B64.encode(bytes),
                };
                self.send_control(msg)
            }
            None => Ok(()),
        }
    }

    fn link_up(&mut self, i: usize) -> Result<(), ServiceError> {
        let now = self.now();
        let l = &self.links[i];
        let Some(peer_key) = l.peer_key else {
            warn!("no pinned key for {}; link stays closed", l.peer);
            return Ok(());
        };
        let relayed = l.path == Some(Route::Relay);
        let initiator = match (relayed, l.role) {
            (false, Role::Prober) => true,
            (false, Role::Opener) => false,
            _ => self.opts.id < l.peer,
        };
        let (hs, hello) = if initiator {
            let (hs, hello) = LinkHandshake::initiate(&self.identity, peer_key, l.sid, now, &mut self.rng);
            (hs, Some(hello))
        } else {
            (LinkHandshake::responder(&self.identity, peer_key, l.sid), None)
        };
        self.links[i].hs = Some(if relayed { hs.reliable() } else { hs });
        match hello {
            Some(h) => self.send_link(i, h),
            None => Ok(()),
        }
    }

    fn on_link_bytes(&mut self, i: usize, bytes: &[u8]) -> Result<(), ServiceError> {
        let now = self.now();
        if HandshakeKind::peek(bytes).is_some() {
            let Some(hs) = self.links[i].hs.as_mut() else { return Ok(()) };
            let step = hs.handle_message(now, bytes, &mut self.rng);
            if let Some(f) = hs.failure() {
                warn!("handshake with {} failed: {f}", self.links[i].peer);
            }
            if let Some(b) = step.send {
                self.send_link(i, b)?;
            }
            if let Some(keys) = step.keys {
                self.links[i].codec = Some(LinkCodec::Secure(Box::new(keys)));
                let l = &self.links[i];
                let path = if l.path == Some(Route::Relay) { "relayed" } else { "direct" };
                say(format!("link {} {path} encrypted", l.peer));
            }
            return Ok(());
        }
        let Some(codec) = self.links[i].codec.as_mut() else { return Ok(()) };
        let Ok(plain) = codec.open(bytes) else {
            debug!("dropped a frame from {}", self.links[i].peer);
            return Ok(());
        };
        if let Some(AppMessage::Marker(text)) = AppMessage::decode(&plain) {
            let text = String::from_utf8_lossy(&text).into_owned();
            if let Some(req) = text.strip_prefix(ECHO_REQUEST) {
                say(format!("echo-served {} {req}", self.links[i].peer));
                self.seal_send(i, format!("{ECHO_REPLY}{req}"))?;
            } else if let Some(rep) = text.strip_prefix(ECHO_REPLY) {
                if self.links[i].echo_reply.is_none() {
                    say(format!("echo {} {rep}", self.links[i].peer));
                }
                self.links[i].echo_reply = Some(rep.to_string());
            }
        }
        Ok(())
    }

    fn seal_send(&mut self, i: usize, text: String) -> Result<(), ServiceError> {
        let Some(codec) = self.links[i].codec.as_mut() else { return Ok(()) };
        match codec.seal(&AppMessage::Marker(text.into_bytes()).encode()) {
            Ok(wire) => self.send_link(i, wire),
            Err(e) => {
                warn!("cannot seal: {e}");
                Ok(())
            }
        }
    }

    fn tick(&mut self) -> Result<(), ServiceError> {
        let now = self.now();
        if let Some(c) = self.classifier.as_mut() {
            c.handle_timeout(now);
            while let Some(t) = c.poll_transmit() {
                if let Err(e) = self.socks[0].send_to(&t.payload, t.dst) {
                    debug!("observe request to {}: {e}", t.dst);
                }
            }
            if let Some(class) = c.outcome() {
                self.classifier = None;
                self.classified = true;
                self.nat = class;
                say(format!("nat {class}"));
                self.register()?;
                if self.opts.peer.is_some() {
                    self.intro_next = Some(now + INTRO_DELAY);
                }
            }
        }
        for l in &mut self.links {
            if let Some(p) = l.punch.as_mut() {
                p.handle_timeout(now);
            }
        }
        self.process_punches()?;

        if self.intro_next.is_some_and(|t| t <= now) {
            self.intro_next = None;
            if let Some(peer) = self.opts.peer.clone() {
                if self.links.iter().all(|l| l.peer != peer) {
                    self.intro_sends += 1;
                    self.send_control(ControlMessage::IntroduceRequest { peer })?;
                }
            }
        }
        for i in 0..self.links.len() {
            let resend = self.links[i].hs.as_mut().and_then(|h| h.handle_timeout(now));
            if let Some(b) = resend {
                self.send_link(i, b)?;
            }
            let l = &self.links[i];
            let wants_echo = self.opts.peer.as_deref() == Some(l.peer.as_str()) && l.echo_reply.is_none();
            if let (true, Some(text), true) = (wants_echo, &self.opts.echo, l.codec.is_some()) {
                if l.echo_sends < ECHO_SENDS && l.echo_next <= now {
                    let text = format!("{ECHO_REQUEST}{text}");
                    self.links[i].echo_sends += 1;
                    self.links[i].echo_next = now + RETRY;
                    self.seal_send(i, text)?;
                }
            }
        }
        if now >= self.next_keepalive {
            self.next_keepalive = now + KEEPALIVE;
            self.send_control(ControlMessage::Ping { nonce: now.as_millis() as u64 })?;
        }
        Ok(())
    }
}
