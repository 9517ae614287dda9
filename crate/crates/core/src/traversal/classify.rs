use std::collections::VecDeque;
use std::net::SocketAddrV4;
use std::time::Duration;

use super::{NatClass, Transmit};
use crate::rendezvous::protocol::{decode_line, ControlMessage};
use crate::seed::mix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifyConfig {
    pub tries: u8,
    pub interval: Duration,
    /// Identifies the sender to a coordinator that receives the request as
    /// a bare datagram.
    pub node_id: Option<String>,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            tries: 3,
            interval: Duration::from_secs(1),
            node_id: None,
            seed: 0,
        }
    }
}

/// Sans-IO NAT classifier.
///
/// Sends `observe` requests from one socket to two observer endpoints and
/// compares what each one saw.
#[derive(Debug, Clone)]
pub struct NatClassifier {
    local: SocketAddrV4,
    observers: [SocketAddrV4; 2],
    cfg: ClassifyConfig,
    token_base: u64,
    sent: [u8; 2],
    seen: [Option<SocketAddrV4>; 2],
    next_send: Duration,
    deadline: Duration,
    outcome: Option<NatClass>,
    queue: VecDeque<Transmit>,
}

impl NatClassifier {
    pub fn new(local: SocketAddrV4, observers: [SocketAddrV4; 2], cfg: ClassifyConfig) -> Self {
        Self {
            local,
            observers,
            token_base: mix64(cfg.seed) & 0x0000_FFFF_FFFF_0000,
            cfg,
            sent: [0; 2],
            seen: [None; 2],
            next_send: Duration::MAX,
            deadline: Duration::MAX,
            outcome: None,
            queue: VecDeque::new(),
        }
    }

    pub fn start(&mut self, now: Duration) {
        self.deadline = now + self.cfg.interval * self.cfg.tries as u32;
        self.next_send = now;
        self.handle_timeout(now);
    }

    fn token(&self, target: usize, attempt: u8) -> u64 {
        self.token_base + (target as u64) * 256 + attempt as u64
    }

    fn target_of(&self, token: u64) -> Option<usize> {
        let off = token.checked_sub(self.token_base)?;
        let target = (off / 256) as usize;
        (target < 2 && ((off % 256) as u8) < self.cfg.tries).then_some(target)
    }

    pub fn handle_timeout(&mut self, now: Duration) {
        if self.outcome.is_some() {
            return;
        }
        if now >= self.deadline {
            self.finish();
            return;
        }
        if now >= self.next_send {
            for target in 0..2 {
                if self.seen[target].is_none() && self.sent[target] < self.cfg.tries {
                    let msg = ControlMessage::Observe {
                        token: self.token(target, self.sent[target]),
                        node_id: self.cfg.node_id.clone(),
                    };
                    self.queue.push_back(Transmit {
                        socket: 0,
                        dst: self.observers[target],
                        payload: msg.to_line().into_bytes(),
                    });
                    self.sent[target] += 1;
                }
            }
            self.next_send += self.cfg.interval;
        }
    }

    pub fn handle_datagram(&mut self, from: SocketAddrV4, data: &[u8]) {
        if self.outcome.is_some() {
            return;
        }
        let Ok(text) = std::str::from_utf8(data) else { return };
        let Ok(ControlMessage::Observed { token, endpoint }) = decode_line(text) else { return };
        let Some(target) = self.target_of(token) else { return };
        if from != self.observers[target] {
            return;
        }
        self.seen[target].get_or_insert(endpoint.into());
        if self.seen.iter().all(Option::is_some) {
            self.finish();
        }
    }

    fn finish(&mut self) {
        self.outcome = Some(classify(self.local, self.seen));
    }

    pub fn poll_transmit(&mut self) -> Option<Transmit> {
        self.queue.pop_front()
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        self.outcome
            .is_none()
            .then(|| self.next_send.min(self.deadline))
    }

    pub fn outcome(&self) -> Option<NatClass> {
        self.outcome
    }

    /// What each observer reported, in observer order.
    pub fn observations(&self) -> [Option<SocketAddrV4>; 2] {
        self.seen
    }
}

/// Decision rule applied to the two observations.
pub fn classify(local: SocketAddrV4, seen: [Option<SocketAddrV4>; 2]) -> NatClass {
    match seen {
        [None, None] => NatClass::UdpBlocked,
        [Some(_), None] | [None, Some(_)] => NatClass::Unknown,
        [Some(a), Some(b)] if a == local && b == local => NatClass::Public,
        [Some(a), Some(b)] if a.port() == b.port() => NatClass::Easy,
        _ => NatClass::Hard,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rendezvous::protocol::Endpoint;
    use std::net::Ipv4Addr;

    fn sa(a: u8, port: u16) -> SocketAddrV4 {
        SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, a), port)
    }

    const LOCAL: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(192, 168, 1, 2), 5000);

    #[test]
    fn decision_rule() {
        assert_eq!(classify(LOCAL, [None, None]), NatClass::UdpBlocked);
        assert_eq!(classify(LOCAL, [Some(sa(1, 7)), None]), NatClass::Unknown);
        assert_eq!(classify(LOCAL, [Some(LOCAL), Some(LOCAL)]), NatClass::Public);
        assert_eq!(classify(LOCAL, [Some(sa(1, 7)), Some(sa(1, 7))]), NatClass::Easy);
        assert_eq!(classify(LOCAL, [Some(sa(1, 7)), Some(sa(1, 8))]), NatClass::Hard);
    }

    fn answer(c: &mut NatClassifier, t: &Transmit, seen: SocketAddrV4) {
        let text = std::str::from_utf8(&t.payload).unwrap();
        let ControlMessage::Observe { token, .. } = decode_line(text).unwrap() else { panic!() };
        let reply = ControlMessage::Observed {
            token,
            endpoint: Endpoint::from(seen),
        };
        c.handle_datagram(t.dst, reply.to_line().as_bytes());
    }

    #[test]
    fn answers_finish_early() {
        let obs = [sa(1, 3478), sa(1, 3479)];
        let mut c = NatClassifier::new(LOCAL, obs, ClassifyConfig::default());
        c.start(Duration::ZERO);
        let out: Vec<_> = std::iter::from_fn(|| c.poll_transmit()).collect();
        assert_eq!(out.len(), 2);
        answer(&mut c, &out[0], sa(9, 100));
        assert_eq!(c.outcome(), None);
        // A reply from the wrong observer is ignored.
        let mut forged = out[1].clone();
        forged.dst = sa(7, 1);
        answer(&mut c, &forged, sa(9, 100));
        assert_eq!(c.outcome(), None);
        answer(&mut c, &out[1], sa(9, 101));
        assert_eq!(c.outcome(), Some(NatClass::Hard));
    }

    #[test]
    fn silence_means_blocked_after_three_tries() {
        let obs = [sa(1, 3478), sa(1, 3479)];
        let mut c = NatClassifier::new(LOCAL, obs, ClassifyConfig::default());
        c.start(Duration::ZERO);
        let mut sent = 0;
        let mut now = Duration::ZERO;
        loop {
            sent += std::iter::from_fn(|| c.poll_transmit()).count();
            let Some(t) = c.poll_timeout() else { break };
            now = t;
            c.handle_timeout(now);
        }
        assert_eq!(sent, 6);
        assert_eq!(now, Duration::from_secs(3));
        assert_eq!(c.outcome(), Some(NatClass::UdpBlocked));
    }

    #[test]
    fn one_lost_observer_is_unknown() {
        let obs = [sa(1, 3478), sa(1, 3479)];
        let mut c = NatClassifier::new(LOCAL, obs, ClassifyConfig::default());
        c.start(Duration::ZERO);
        let first = c.poll_transmit().unwrap();
        answer(&mut c, &first, sa(9, 100));
        c.handle_timeout(Duration::from_secs(3));
        assert_eq!(c.outcome(), Some(NatClass::Unknown));
    }
}
