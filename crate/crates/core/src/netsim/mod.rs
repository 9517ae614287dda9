//! Deterministic discrete-event network with simulated NAT boxes.
//!
//! A [`Network`] owns a virtual clock, an event queue ordered by
//! `(time, sequence)`, a set of hosts (each optionally behind a NAT) and one
//! seeded random generator from which every loss and jitter draw is taken.
//! Two runs of the same scenario with the same seed produce the same trace.
//!
//! Hosts exchange two kinds of traffic:
//!
//! * datagrams, which are translated by NATs, filtered, delayed, lost or
//!   blocked according to each host's [`LinkPolicy`];
//! * reliable messages, an ordered lossless channel used for coordination.
//!   They bypass loss and UDP blocking but not latency.
//!
//! The network never interprets payloads. Host-level events are handed back
//! to the caller through [`Network::next_event`].

mod nat;
mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nat::{
    DropReason, FilteringMode, MappingEntry, MappingMode, NatProfile, NatState, PortAllocation,
};
pub use trace::{Trace, TraceMode, TraceRecord};

/// Largest datagram payload the simulator accepts.
pub const MAX_PAYLOAD: usize = 1200;

const EPHEMERAL_BASE: u16 = 40000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("NAT {0} has no free external ports")]
    PortsExhausted(Ipv4Addr),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLarge(usize),
    #[error("host {0} has no socket bound to port {1}")]
    NotBound(HostId, u16),
    #[error("port {1} already bound on host {0}")]
    AddrInUse(HostId, u16),
    #[error("no free ephemeral port on host {0}")]
    NoEphemeral(HostId),
    #[error("address {0} is already attached")]
    DuplicateAddress(Ipv4Addr),
}

/// Virtual time in microseconds since the scenario started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_duration(self) -> std::time::Duration {
        std::time::Duration::from_micros(self.0)
    }

    pub fn from_duration(d: std::time::Duration) -> Self {
        SimTime(d.as_micros() as u64)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}s", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(pub usize);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NatId(pub usize);

/// Properties of a host's access link, applied in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPolicy {
    pub loss_probability: f64,
    pub latency_us: u64,
    /// Upper bound of a uniform extra delay.
    pub jitter_us: u64,
    /// Drop every datagram regardless of `loss_probability`.
    pub udp_blocked: bool,
}

impl Default for LinkPolicy {
    fn default() -> Self {
        Self {
            loss_probability: 0.0,
            latency_us: 10_000,
            jitter_us: 0,
            udp_blocked: false,
        }
    }
}

impl LinkPolicy {
    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_probability = p;
        self
    }

    pub fn blocked() -> Self {
        Self {
            udp_blocked: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub payload: Vec<u8>,
    pub injected_at: SimTime,
}

/// Something the application layer must react to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostEvent {
    Datagram {
        host: HostId,
        local_port: u16,
        from: SocketAddrV4,
        payload: Vec<u8>,
    },
    Timer {
        host: HostId,
        tag: u64,
    },
    Message {
        host: HostId,
        from: HostId,
        payload: Vec<u8>,
    },
}

impl HostEvent {
    pub fn host(&self) -> HostId {
        match self {
            HostEvent::Datagram { host, .. }
            | HostEvent::Timer { host, .. }
            | HostEvent::Message { host, .. } => *host,
        }
    }
}

/// Outcome of [`Network::send`] at injection time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled { at: SimTime, src: SocketAddrV4 },
    Dropped(DropReason),
    DeadLetter,
}

/// A datagram or message seen on the wire, for sniffing tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captured {
    pub at: SimTime,
    pub reliable: bool,
    pub src: String,
    pub dst: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attachment {
    Host(HostId),
    Nat(NatId),
}

#[derive(Debug, Clone)]
struct Host {
    name: String,
    ip: Ipv4Addr,
    nat: Option<NatId>,
    link: LinkPolicy,
    bound: BTreeSet<u16>,
}

#[derive(Debug, Clone)]
enum Pending {
    Arrive { dgram: Datagram, to: Attachment },
    Timer { host: HostId, tag: u64 },
    Message { from: HostId, to: HostId, payload: Vec<u8> },
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    what: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// The simulated network.
#[derive(Debug)]
pub struct Network {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    hosts: Vec<Host>,
    nats: Vec<NatState>,
    public: HashMap<Ipv4Addr, Attachment>,
    private: HashMap<Ipv4Addr, HostId>,
    rng: ChaCha8Rng,
    trace: Trace,
    capture: Option<Vec<Captured>>,
    last_message: HashMap<(HostId, HostId), SimTime>,
    dead_letters: u64,
    processed: u64,
}

impl Network {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            hosts: Vec::new(),
            nats: Vec::new(),
            public: HashMap::new(),
            private: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Trace::default(),
            capture: None,
            last_message: HashMap::new(),
            dead_letters: 0,
            processed: 0,
        }
    }

    pub fn with_trace(mut self, mode: TraceMode) -> Self {
        self.trace = Trace::new(mode);
        self
    }

    pub fn enable_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn captured(&self) -> &[Captured] {
        self.capture.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn dead_letters(&self) -> u64 {
        self.dead_letters
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn add_nat(&mut self, profile: NatProfile) -> Result<NatId, NetError> {
        let ip = profile.public_ip;
        if self.public.contains_key(&ip) || self.private.contains_key(&ip) {
            return Err(NetError::DuplicateAddress(ip));
        }
        let id = NatId(self.nats.len());
        self.nats.push(NatState::new(profile));
        self.public.insert(ip, Attachment::Nat(id));
        Ok(id)
    }

    /// Attach a host. Hosts behind a NAT get a private address that is only
    /// reachable through that NAT.
    pub fn add_host(
        &mut self,
        name: impl Into<String>,
        ip: Ipv4Addr,
        nat: Option<NatId>,
        link: LinkPolicy,
    ) -> Result<HostId, NetError> {
        if self.public.contains_key(&ip) || self.private.contains_key(&ip) {
            return Err(NetError::DuplicateAddress(ip));
        }
        let id = HostId(self.hosts.len());
        self.hosts.push(Host {
            name: name.into(),
            ip,
            nat,
            link,
            bound: BTreeSet::new(),
        });
        match nat {
            Some(_) => {
                self.private.insert(ip, id);
            }
            None => {
                self.public.insert(ip, Attachment::Host(id));
            }
        }
        Ok(id)
    }

    pub fn host_name(&self, host: HostId) -> &str {
        &self.hosts[host.0].name
    }

    pub fn host_ip(&self, host: HostId) -> Ipv4Addr {
        self.hosts[host.0].ip
    }

    pub fn host_nat(&self, host: HostId) -> Option<NatId> {
        self.hosts[host.0].nat
    }

    pub fn link(&self, host: HostId) -> LinkPolicy {
        self.hosts[host.0].link
    }

    pub fn set_link(&mut self, host: HostId, link: LinkPolicy) {
        self.hosts[host.0].link = link;
    }

    pub fn nat(&self, nat: NatId) -> &NatState {
        &self.nats[nat.0]
    }

    /// Bind a socket; `None` picks the lowest free ephemeral port.
    pub fn bind(&mut self, host: HostId, port: Option<u16>) -> Result<u16, NetError> {
        let h = &mut self.hosts[host.0];
        let port = match port {
            Some(p) => {
                if !h.bound.insert(p) {
                    return Err(NetError::AddrInUse(host, p));
                }
                p
            }
            None => {
                let mut want = EPHEMERAL_BASE as u32;
                for &b in h.bound.range(EPHEMERAL_BASE..) {
                    if b as u32 != want {
                        break;
                    }
                    want += 1;
                }
                let p = u16::try_from(want).map_err(|_| NetError::NoEphemeral(host))?;
                h.bound.insert(p);
                p
            }
        };
        Ok(port)
    }

    pub fn unbind(&mut self, host: HostId, port: u16) {
        self.hosts[host.0].bound.remove(&port);
    }

    pub fn is_bound(&self, host: HostId, port: u16) -> bool {
        self.hosts[host.0].bound.contains(&port)
    }

    /// The endpoint a remote party at `dst` would see for `host:local_port`.
    /// Behind a NAT this creates or refreshes the mapping, exactly as a real
    /// outbound packet would.
    pub fn translate_outbound(
        &mut self,
        host: HostId,
        local_port: u16,
        dst: SocketAddrV4,
    ) -> Result<SocketAddrV4, NetError> {
        let h = &self.hosts[host.0];
        let internal = SocketAddrV4::new(h.ip, local_port);
        match h.nat {
            None => Ok(internal),
            Some(nat) => {
                let now = self.now;
                let nat_state = &mut self.nats[nat.0];
                let fresh = self.trace.enabled()
                    && nat_state.mapping_for_port_of(internal, dst, now).is_none();
                let ext = nat_state.outbound(internal, dst, now, &mut self.rng)?;
                if fresh {
                    self.trace.push(
                        now,
                        "nat_map",
                        internal.to_string(),
                        dst.to_string(),
                        ext.to_string(),
                    );
                }
                Ok(ext)
            }
        }
    }

    /// Inject a datagram from `host:local_port` towards `dst`.
    pub fn send(
        &mut self,
        host: HostId,
        local_port: u16,
        dst: SocketAddrV4,
        payload: Vec<u8>,
    ) -> Result<SendOutcome, NetError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(NetError::PayloadTooLarge(payload.len()));
        }
        if !self.is_bound(host, local_port) {
            return Err(NetError::NotBound(host, local_port));
        }
        let src = self.translate_outbound(host, local_port, dst)?;
        let sender_link = self.hosts[host.0].link;
        let now = self.now;
        if self.trace.enabled() {
            self.trace.push(
                now,
                "send",
                src.to_string(),
                dst.to_string(),
                format!("len={}", payload.len()),
            );
        }
        if let Some(cap) = self.capture.as_mut() {
            cap.push(Captured {
                at: now,
                reliable: false,
                src: src.to_string(),
                dst: dst.to_string(),
                payload: payload.clone(),
            });
        }
        let Some(&to) = self.public.get(dst.ip()) else {
            self.dead_letters += 1;
            self.trace_drop(src, dst, "dead-letter");
            return Ok(SendOutcome::DeadLetter);
        };
        // Behind a NAT the receiving access link is that of the host the
        // current mapping points at. Filtering itself happens on arrival.
        let receiver_link = match to {
            Attachment::Host(h) => self.hosts[h.0].link,
            Attachment::Nat(nat) => self.nats[nat.0]
                .mapping_for_port(dst.port())
                .and_then(|m| self.private.get(m.internal.ip()))
                .map(|h| self.hosts[h.0].link)
                .unwrap_or(LinkPolicy {
                    latency_us: 0,
                    ..LinkPolicy::default()
                }),
        };
        let mut delay = 0u64;
        for link in [sender_link, receiver_link] {
            if let Some(reason) = self.link_drop(&link) {
                self.trace_drop(src, dst, reason.as_str());
                return Ok(SendOutcome::Dropped(reason));
            }
            delay += self.link_delay(&link);
        }
        let at = now + SimTime::from_micros(delay);
        self.schedule(
            at,
            Pending::Arrive {
                dgram: Datagram {
                    src,
                    dst,
                    payload,
                    injected_at: now,
                },
                to,
            },
        );
        Ok(SendOutcome::Scheduled { at, src })
    }

    /// Send over the ordered lossless channel. Delivery keeps per-pair order.
    pub fn send_message(&mut self, from: HostId, to: HostId, payload: Vec<u8>) {
        let latency = self.hosts[from.0].link.latency_us + self.hosts[to.0].link.latency_us;
        let mut at = self.now + SimTime::from_micros(latency);
        if let Some(&last) = self.last_message.get(&(from, to)) {
            at = at.max(last);
        }
        self.last_message.insert((from, to), at);
        if let Some(cap) = self.capture.as_mut() {
            cap.push(Captured {
                at: self.now,
                reliable: true,
                src: self.hosts[from.0].name.clone(),
                dst: self.hosts[to.0].name.clone(),
                payload: payload.clone(),
            });
        }
        self.schedule(at, Pending::Message { from, to, payload });
    }

    pub fn set_timer(&mut self, host: HostId, at: SimTime, tag: u64) {
        let at = at.max(self.now);
        self.schedule(at, Pending::Timer { host, tag });
    }

    /// Time of the next queued event.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Advance to and return the next host-level event at or before `until`.
    /// Datagrams dropped on arrival are consumed silently (and traced).
    pub fn next_event(&mut self, until: SimTime) -> Option<HostEvent> {
        loop {
            let next_at = self.peek_time()?;
            if next_at > until {
                return None;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.processed += 1;
            match ev.what {
                Pending::Timer { host, tag } => {
                    if self.trace.enabled() {
                        let name = self.hosts[host.0].name.clone();
                        self.trace.push(self.now, "timer", name, String::new(), tag.to_string());
                    }
                    return Some(HostEvent::Timer { host, tag });
                }
                Pending::Message { from, to, payload } => {
                    if self.trace.enabled() {
                        let (f, t) = (self.hosts[from.0].name.clone(), self.hosts[to.0].name.clone());
                        self.trace.push(self.now, "message", f, t, format!("len={}", payload.len()));
                    }
                    return Some(HostEvent::Message {
                        host: to,
                        from,
                        payload,
                    });
                }
                Pending::Arrive { dgram, to } => {
                    if let Some(ev) = self.arrive(dgram, to) {
                        return Some(ev);
                    }
                }
            }
        }
    }

    /// Drain events up to `until`, handing each host event to `handler`.
    /// Returns the number of queue entries processed, including datagrams
    /// that were dropped on arrival.
    pub fn run_until<F>(&mut self, until: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Network, HostEvent),
    {
        let start = self.processed;
        while let Some(ev) = self.next_event(until) {
            handler(self, ev);
        }
        if self.now < until {
            self.now = until;
        }
        self.processed - start
    }

    fn arrive(&mut self, dgram: Datagram, to: Attachment) -> Option<HostEvent> {
        let (host, local) = match to {
            Attachment::Host(h) => (h, dgram.dst),
            Attachment::Nat(nat) => {
                let now = self.now;
                match self.nats[nat.0].inbound(dgram.src, dgram.dst.port(), now) {
                    Ok(internal) => {
                        let Some(&h) = self.private.get(internal.ip()) else {
                            self.dead_letters += 1;
                            self.trace_drop(dgram.src, dgram.dst, "dead-letter");
                            return None;
                        };
                        (h, internal)
                    }
                    Err(reason) => {
                        self.trace_drop(dgram.src, dgram.dst, reason.as_str());
                        return None;
                    }
                }
            }
        };
        if !self.is_bound(host, local.port()) {
            self.trace_drop(dgram.src, dgram.dst, DropReason::Unbound.as_str());
            return None;
        }
        if self.trace.enabled() {
            self.trace.push(
                self.now,
                "deliver",
                dgram.src.to_string(),
                local.to_string(),
                format!("len={}", dgram.payload.len()),
            );
        }
        Some(HostEvent::Datagram {
            host,
            local_port: local.port(),
            from: dgram.src,
            payload: dgram.payload,
        })
    }

    fn link_drop(&mut self, link: &LinkPolicy) -> Option<DropReason> {
        if link.udp_blocked {
            return Some(DropReason::UdpBlocked);
        }
        if link.loss_probability > 0.0 && self.rng.gen::<f64>() < link.loss_probability {
            return Some(DropReason::Loss);
        }
        None
    }

    fn link_delay(&mut self, link: &LinkPolicy) -> u64 {
        let jitter = if link.jitter_us > 0 {
            self.rng.gen_range(0..=link.jitter_us)
        } else {
            0
        };
        link.latency_us + jitter
    }

    fn trace_drop(&mut self, src: SocketAddrV4, dst: SocketAddrV4, reason: &str) {
        if self.trace.enabled() {
            self.trace
                .push(self.now, "drop", src.to_string(), dst.to_string(), reason.to_string());
        }
    }

    fn schedule(&mut self, at: SimTime, what: Pending) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, what }));
    }
}

impl NatState {
    fn mapping_for_port_of(
        &self,
        internal: SocketAddrV4,
        dst: SocketAddrV4,
        now: SimTime,
    ) -> Option<u16> {
        self.live_mappings(now)
            .find(|m| {
                m.internal == internal
                    && match self.profile().mapping_mode {
                        MappingMode::EndpointIndependent => true,
                        MappingMode::EndpointDependent => m.remote == Some(dst),
                    }
            })
            .map(|m| m.external_port)
    }
}
