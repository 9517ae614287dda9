use std::collections::{HashSet, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use super::packet::{PacketKind, ProbePacket};
use super::{FailReason, PunchConfig, SessionId, Transmit, TraversalError};
use crate::probability::schedule_ports;
use crate::seed::mix64;

pub const DIRECT_INTERVAL: Duration = Duration::from_millis(100);
pub const DIRECT_TIMEOUT: Duration = Duration::from_secs(5);
/// Number of CONFIRM transmissions after a successful PROBE_ACK.
pub const CONFIRM_SENDS: u8 = 3;
const CONFIRM_SPACING: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PunchOutcome {
    Established { socket: usize, peer: SocketAddrV4 },
    Failed(FailReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PunchStats {
    pub probes_sent: u32,
    pub received: u32,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
struct ConfirmSender {
    packet: ProbePacket,
    socket: usize,
    dst: SocketAddrV4,
    remaining: u8,
    next_at: Duration,
}

impl ConfirmSender {
    fn new(packet: ProbePacket, socket: usize, dst: SocketAddrV4, now: Duration) -> Self {
        Self {
            packet,
            socket,
            dst,
            remaining: CONFIRM_SENDS,
            next_at: now,
        }
    }

    fn poll(&mut self, now: Duration, queue: &mut VecDeque<Transmit>) {
        while self.remaining > 0 && self.next_at <= now {
            queue.push_back(Transmit {
                socket: self.socket,
                dst: self.dst,
                payload: self.packet.encode().to_vec(),
            });
            self.remaining -= 1;
            self.next_at += CONFIRM_SPACING;
        }
    }

    fn next_timeout(&self) -> Option<Duration> {
        (self.remaining > 0).then_some(self.next_at)
    }
}

/// Shared bookkeeping for the three machines.
#[derive(Debug, Clone, Default)]
struct Core {
    started: Option<Duration>,
    outcome: Option<PunchOutcome>,
    stats: PunchStats,
    queue: VecDeque<Transmit>,
}

impl Core {
    fn send(&mut self, socket: usize, dst: SocketAddrV4, packet: ProbePacket) {
        if packet.kind == PacketKind::Probe {
            self.stats.probes_sent += 1;
        }
        self.queue.push_back(Transmit {
            socket,
            dst,
            payload: packet.encode().to_vec(),
        });
    }

    fn finish(&mut self, now: Duration, outcome: PunchOutcome) {
        if self.outcome.is_none() {
            self.outcome = Some(outcome);
            self.stats.elapsed = now.saturating_sub(self.started.unwrap_or(now));
        }
    }

    fn established(&self) -> bool {
        matches!(self.outcome, Some(PunchOutcome::Established { .. }))
    }

    fn done(&self) -> bool {
        self.outcome.is_some()
    }
}

/// Interface shared by every punch machine.
pub trait PunchMachine {
    /// Sockets the caller must bind before `start`. Transmit and receive
    /// indices refer to this list.
    fn socket_count(&self) -> usize;
    fn session(&self) -> SessionId;
    fn start(&mut self, now: Duration);
    fn handle_datagram(&mut self, now: Duration, socket: usize, from: SocketAddrV4, data: &[u8]);
    fn handle_timeout(&mut self, now: Duration);
    fn poll_transmit(&mut self) -> Option<Transmit>;
    fn poll_timeout(&self) -> Option<Duration>;
    fn outcome(&self) -> Option<PunchOutcome>;
    fn stats(&self) -> PunchStats;
}

/// Simultaneous open between two peers that both know each other's stable
/// external endpoint.
#[derive(Debug, Clone)]
pub struct DirectPunch {
    session: SessionId,
    peer: SocketAddrV4,
    nonce_base: u64,
    next_probe: Duration,
    deadline: Duration,
    sent: HashSet<u64>,
    acked: HashSet<u64>,
    confirm: Option<ConfirmSender>,
    core: Core,
}

impl DirectPunch {
    pub fn new(session: SessionId, peer: SocketAddrV4, seed: u64) -> Self {
        Self {
            session,
            peer,
            nonce_base: mix64(seed ^ session.as_u64()),
            next_probe: Duration::ZERO,
            deadline: Duration::MAX,
            sent: HashSet::new(),
            acked: HashSet::new(),
            confirm: None,
            core: Core::default(),
        }
    }

    fn tick(&mut self, now: Duration) {
        if let Some(c) = self.confirm.as_mut() {
            c.poll(now, &mut self.core.queue);
        }
        if self.core.done() {
            return;
        }
        if now >= self.deadline {
            self.core.finish(now, PunchOutcome::Failed(FailReason::Timeout));
            return;
        }
        while self.next_probe <= now {
            let nonce = mix64(self.nonce_base ^ self.sent.len() as u64);
            self.sent.insert(nonce);
            self.core.send(0, self.peer, ProbePacket::new(PacketKind::Probe, self.session, nonce));
            self.next_probe += DIRECT_INTERVAL;
        }
    }
}

impl PunchMachine for DirectPunch {
    fn socket_count(&self) -> usize {
        1
    }

    fn session(&self) -> SessionId {
        self.session
    }

    fn start(&mut self, now: Duration) {
        self.core.started = Some(now);
        self.deadline = now + DIRECT_TIMEOUT;
        self.next_probe = now;
        self.tick(now);
    }

    fn handle_datagram(&mut self, now: Duration, socket: usize, from: SocketAddrV4, data: &[u8]) {
        let Some(pkt) = ProbePacket::decode(data) else { return };
        if pkt.session != self.session || socket != 0 {
            return;
        }
        if matches!(self.core.outcome, Some(PunchOutcome::Failed(_))) {
            return;
        }
        self.core.stats.received += 1;
        match pkt.kind {
            PacketKind::Probe => {
                self.acked.insert(pkt.nonce);
                self.core.send(0, from, pkt.reply(PacketKind::ProbeAck));
            }
            PacketKind::ProbeAck if self.sent.contains(&pkt.nonce) => {
                if !self.core.established() {
                    self.core.finish(now, PunchOutcome::Established { socket: 0, peer: from });
                    self.confirm = Some(ConfirmSender::new(pkt.reply(PacketKind::Confirm), 0, from, now));
                    self.tick(now);
                }
            }
            PacketKind::Confirm if self.acked.contains(&pkt.nonce) => {
                self.core.finish(now, PunchOutcome::Established { socket: 0, peer: from });
            }
            _ => {}
        }
    }

    fn handle_timeout(&mut self, now: Duration) {
        self.tick(now);
    }

    fn poll_transmit(&mut self) -> Option<Transmit> {
        self.core.queue.pop_front()
    }

    fn poll_timeout(&self) -> Option<Duration> {
        let confirm = self.confirm.as_ref().and_then(ConfirmSender::next_timeout);
        let own = (!self.core.done()).then(|| self.next_probe.min(self.deadline));
        [confirm, own].into_iter().flatten().min()
    }

    fn outcome(&self) -> Option<PunchOutcome> {
        self.core.outcome
    }

    fn stats(&self) -> PunchStats {
        self.core.stats
    }
}

/// The hard-NAT side of a birthday punch.
///
/// Every socket sends to the prober's exact external endpoint, so the hard
/// NAT allocates `open_ports` distinct mappings that admit that one source.
/// Whichever socket a probe lands on answers from the same socket, which
/// leaves through the same mapping.
#[derive(Debug, Clone)]
pub struct BirthdayOpener {
    session: SessionId,
    prober: SocketAddrV4,
    cfg: PunchConfig,
    nonce_base: u64,
    next_refresh: Duration,
    deadline: Duration,
    acked: Vec<Option<(u64, SocketAddrV4)>>,
    core: Core,
}

impl BirthdayOpener {
    pub fn new(session: SessionId, prober: SocketAddrV4, cfg: PunchConfig) -> Result<Self, TraversalError> {
        cfg.validate()?;
        Ok(Self {
            session,
            prober,
            nonce_base: mix64(cfg.seed ^ session.as_u64() ^ 0x0FE4),
            cfg,
            next_refresh: Duration::MAX,
            deadline: Duration::MAX,
            acked: vec![None; cfg.open_ports as usize],
            core: Core::default(),
        })
    }

    /// Report that only `bound` of the requested sockets could be bound.
    pub fn sockets_unavailable(&mut self, now: Duration, bound: usize) {
        if bound < self.socket_count() {
            self.core.started.get_or_insert(now);
            self.core.finish(now, PunchOutcome::Failed(FailReason::Resources));
        }
    }

    /// Any non-probe traffic from the recorded peer on the acknowledged
    /// socket counts as a confirmation.
    pub fn implicit_confirm(&mut self, now: Duration, socket: usize, from: SocketAddrV4) {
        if self.core.done() {
            return;
        }
        if self.acked.get(socket).copied().flatten().is_some_and(|(_, peer)| peer == from) {
            self.core.finish(now, PunchOutcome::Established { socket, peer: from });
        }
    }

    fn open_all(&mut self) {
        for socket in 0..self.socket_count() {
            let nonce = mix64(self.nonce_base ^ socket as u64);
            self.core
                .send(socket, self.prober, ProbePacket::new(PacketKind::Probe, self.session, nonce));
        }
    }
}

impl PunchMachine for BirthdayOpener {
    fn socket_count(&self) -> usize {
        self.cfg.open_ports as usize
    }

    fn session(&self) -> SessionId {
        self.session
    }

    fn start(&mut self, now: Duration) {
        if self.core.done() {
            return;
        }
        self.core.started = Some(now);
        self.deadline = now + self.cfg.max_duration + self.cfg.linger * 2;
        self.next_refresh = now + self.cfg.refresh_interval;
        self.open_all();
    }

    fn handle_datagram(&mut self, now: Duration, socket: usize, from: SocketAddrV4, data: &[u8]) {
        let Some(pkt) = ProbePacket::decode(data) else { return };
        if pkt.session != self.session || socket >= self.socket_count() {
            return;
        }
        if matches!(self.core.outcome, Some(PunchOutcome::Failed(_))) {
            return;
        }
        self.core.stats.received += 1;
        match pkt.kind {
            PacketKind::Probe => {
                self.acked[socket] = Some((pkt.nonce, from));
                self.core.send(socket, from, pkt.reply(PacketKind::ProbeAck));
            }
            PacketKind::Confirm if self.acked[socket] == Some((pkt.nonce, from)) => {
                self.core.finish(now, PunchOutcome::Established { socket, peer: from });
            }
            _ => {}
        }
    }

    fn handle_timeout(&mut self, now: Duration) {
        if self.core.done() {
            return;
        }
        if now >= self.deadline {
            self.core.finish(now, PunchOutcome::Failed(FailReason::Timeout));
            return;
        }
        if now >= self.next_refresh {
            self.open_all();
            self.next_refresh += self.cfg.refresh_interval;
        }
    }

    fn poll_transmit(&mut self) -> Option<Transmit> {
        self.core.queue.pop_front()
    }

    fn poll_timeout(&self) -> Option<Duration> {
        (!self.core.done()).then(|| self.next_refresh.min(self.deadline))
    }

    fn outcome(&self) -> Option<PunchOutcome> {
        self.core.outcome
    }

    fn stats(&self) -> PunchStats {
        self.core.stats
    }
}

/// The easy side of a birthday punch: one fixed socket probing distinct
/// random ports of the opener's public address at a steady rate.
#[derive(Debug, Clone)]
pub struct BirthdayProber {
    session: SessionId,
    opener_ip: Ipv4Addr,
    cfg: PunchConfig,
    schedule: Vec<u16>,
    next_index: usize,
    nonce_base: u64,
    deadline: Duration,
    confirm: Option<ConfirmSender>,
    core: Core,
}

impl BirthdayProber {
    pub fn new(session: SessionId, opener_ip: Ipv4Addr, cfg: PunchConfig) -> Result<Self, TraversalError> {
        if cfg.rate == 0 || cfg.rate > super::MAX_PROBE_RATE {
            return Err(TraversalError::InvalidConfig(format!(
                "rate must be in 1..={}, got {}",
                super::MAX_PROBE_RATE,
                cfg.rate
            )));
        }
        let schedule = schedule_ports(cfg.space, cfg.budget(), cfg.seed)?;
        Ok(Self {
            session,
            opener_ip,
            nonce_base: mix64(cfg.seed ^ session.as_u64() ^ 0x9B0B),
            cfg,
            schedule,
            next_index: 0,
            deadline: Duration::MAX,
            confirm: None,
            core: Core::default(),
        })
    }

    /// Ports in the order they will be probed.
    pub fn schedule(&self) -> &[u16] {
        &self.schedule
    }

    fn nonce_for(&self, port: u16) -> u64 {
        mix64(self.nonce_base ^ port as u64)
    }

    fn probe_time(&self, index: usize) -> Duration {
        let started = self.core.started.unwrap_or_default();
        started + Duration::from_micros(index as u64 * 1_000_000 / self.cfg.rate as u64)
    }
}

impl PunchMachine for BirthdayProber {
    fn socket_count(&self) -> usize {
        1
    }

    fn session(&self) -> SessionId {
        self.session
    }

    fn start(&mut self, now: Duration) {
        self.core.started = Some(now);
        self.deadline = now + self.cfg.max_duration + self.cfg.linger;
        self.handle_timeout(now);
    }

    fn handle_datagram(&mut self, now: Duration, socket: usize, from: SocketAddrV4, data: &[u8]) {
        let Some(pkt) = ProbePacket::decode(data) else { return };
        if pkt.session != self.session || socket != 0 {
            return;
        }
        // Probes from the opener only exist to open its own mappings.
        if pkt.kind != PacketKind::ProbeAck || *from.ip() != self.opener_ip {
            return;
        }
        if pkt.nonce != self.nonce_for(from.port()) || self.core.outcome.is_some() {
            return;
        }
        self.core.stats.received += 1;
        self.core.finish(now, PunchOutcome::Established { socket: 0, peer: from });
        let mut confirm = ConfirmSender::new(pkt.reply(PacketKind::Confirm), 0, from, now);
        confirm.poll(now, &mut self.core.queue);
        self.confirm = Some(confirm);
    }

    fn handle_timeout(&mut self, now: Duration) {
        if let Some(c) = self.confirm.as_mut() {
            c.poll(now, &mut self.core.queue);
        }
        if self.core.done() {
            return;
        }
        while self.next_index < self.schedule.len() && self.probe_time(self.next_index) <= now {
            let port = self.schedule[self.next_index];
            let nonce = self.nonce_for(port);
            self.core.send(
                0,
                SocketAddrV4::new(self.opener_ip, port),
                ProbePacket::new(PacketKind::Probe, self.session, nonce),
            );
            self.next_index += 1;
        }
        if now >= self.deadline {
            self.core.finish(now, PunchOutcome::Failed(FailReason::Timeout));
        }
    }

    fn poll_transmit(&mut self) -> Option<Transmit> {
        self.core.queue.pop_front()
    }

    fn poll_timeout(&self) -> Option<Duration> {
        let confirm = self.confirm.as_ref().and_then(ConfirmSender::next_timeout);
        let own = (!self.core.done()).then(|| {
            if self.next_index < self.schedule.len() {
                self.probe_time(self.next_index).min(self.deadline)
            } else {
                self.deadline
            }
        });
        [confirm, own].into_iter().flatten().min()
    }

    fn outcome(&self) -> Option<PunchOutcome> {
        self.core.outcome
    }

    fn stats(&self) -> PunchStats {
        self.core.stats
    }
}

/// Any of the punch machines.
#[derive(Debug, Clone)]
pub enum Punch {
    Direct(DirectPunch),
    Opener(BirthdayOpener),
    Prober(BirthdayProber),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Punch::Direct($m) => $e,
            Punch::Opener($m) => $e,
            Punch::Prober($m) => $e,
        }
    };
}

impl PunchMachine for Punch {
    fn socket_count(&self) -> usize {
        dispatch!(self, m => m.socket_count())
    }
    fn session(&self) -> SessionId {
        dispatch!(self, m => m.session())
    }
    fn start(&mut self, now: Duration) {
        dispatch!(self, m => m.start(now))
    }
    fn handle_datagram(&mut self, now: Duration, socket: usize, from: SocketAddrV4, data: &[u8]) {
        dispatch!(self, m => m.handle_datagram(now, socket, from, data))
    }
    fn handle_timeout(&mut self, now: Duration) {
        dispatch!(self, m => m.handle_timeout(now))
    }
    fn poll_transmit(&mut self) -> Option<Transmit> {
        dispatch!(self, m => m.poll_transmit())
    }
    fn poll_timeout(&self) -> Option<Duration> {
        dispatch!(self, m => m.poll_timeout())
    }
    fn outcome(&self) -> Option<PunchOutcome> {
        dispatch!(self, m => m.outcome())
    }
    fn stats(&self) -> PunchStats {
        dispatch!(self, m => m.stats())
    }
}
