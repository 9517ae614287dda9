//! Monte Carlo punch trials on the simulator.
//!
//! Each trial builds a fresh two-host network: the prober behind an easy
//! NAT and the opener behind a hard one, with each side's external endpoint
//! known up front. Trial seeds come from [`trial_seed`], so a summary does
//! not depend on how many threads ran it.

use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::netsim::{HostEvent, HostId, LinkPolicy, NatProfile, NetError, Network, SimTime};
use crate::probability::{lossy_success_probability, success_probability, ProbabilityError};
use crate::seed::{derive, trial_seed};
use crate::traversal::{
    BirthdayOpener, BirthdayProber, DirectPunch, Punch, PunchConfig, PunchMachine, PunchOutcome, SessionId,
    TraversalError,
};

/// Below this many trials the 3-sigma check is not meaningful.
pub const MIN_TRIALS_FOR_SIGMA: u64 = 100;

const PROBER_NAT_IP: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 10);
const OPENER_NAT_IP: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 20);
const OBSERVER: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(192, 0, 2, 1), 3478);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Traversal(#[from] TraversalError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
    #[error("network setup failed: {0}")]
    Network(#[from] NetError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthdayTrialConfig {
    pub punch: PunchConfig,
    /// Loss on the prober's access link, paid once by each probe and once by
    /// each acknowledgement.
    pub loss: f64,
    /// One-way latency of each access link.
    pub latency_us: u64,
}

impl Default for BirthdayTrialConfig {
    fn default() -> Self {
        Self {
            punch: PunchConfig::default(),
            loss: 0.0,
            latency_us: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialOutcome {
    pub prober_established: bool,
    pub opener_established: bool,
    /// Both sides recorded the same (prober endpoint, opener port) pair.
    pub paths_agree: bool,
    pub probes_sent: u32,
    pub elapsed_ms: u64,
    /// Live mappings on the opener's NAT when the trial ended.
    pub opener_live_mappings: usize,
    pub opener_distinct_ports: usize,
}

struct Slot {
    host: HostId,
    ports: Vec<u16>,
    machine: Punch,
    armed: Option<SimTime>,
}

impl Slot {
    fn new(host: HostId, ports: Vec<u16>, machine: Punch) -> Self {
        Self {
            host,
            ports,
            machine,
            armed: None,
        }
    }

    fn flush(&mut self, net: &mut Network, tag: u64) -> Result<(), NetError> {
        while let Some(t) = self.machine.poll_transmit() {
            net.send(self.host, self.ports[t.socket], t.dst, t.payload)?;
        }
        if let Some(at) = self.machine.poll_timeout().map(SimTime::from_duration) {
            if self.armed != Some(at) {
                net.set_timer(self.host, at, tag);
                self.armed = Some(at);
            }
        }
        Ok(())
    }

    fn on_event(&mut self, net: &mut Network, ev: HostEvent, tag: u64) -> Result<(), NetError> {
        let now = net.now().as_duration();
        match ev {
            HostEvent::Datagram {
                local_port,
                from,
                payload,
                ..
            } => {
                if let Some(socket) = self.ports.iter().position(|p| *p == local_port) {
                    self.machine.handle_datagram(now, socket, from, &payload);
                }
            }
            HostEvent::Timer { .. } => {
                if self.armed.is_some_and(|a| a <= net.now()) {
                    self.armed = None;
                }
                self.machine.handle_timeout(now)
            }
            HostEvent::Message { .. } => {}
        }
        self.flush(net, tag)
    }
}

fn session_for(seed: u64) -> SessionId {
    SessionId::from_bytes(derive(seed, "session").to_be_bytes())
}

/// Run the two machines until both have an outcome or `until` passes.
fn drive(net: &mut Network, slots: &mut [Slot], until: SimTime) -> Result<(), NetError> {
    for (i, s) in slots.iter_mut().enumerate() {
        s.machine.start(net.now().as_duration());
        s.flush(net, i as u64)?;
    }
    while slots.iter().any(|s| s.machine.outcome().is_none()) {
        let Some(ev) = net.next_event(until) else { break };
        let host = ev.host();
        let Some(i) = slots.iter().position(|s| s.host == host) else { continue };
        slots[i].on_event(net, ev, i as u64)?;
    }
    Ok(())
}

/// One seeded birthday punch.
pub fn run_birthday_trial(cfg: &BirthdayTrialConfig, seed: u64) -> Result<TrialOutcome, ExperimentError> {
    if !(0.0..=1.0).contains(&cfg.loss) {
        return Err(ExperimentError::Invalid(format!("loss must lie in [0, 1], got {}", cfg.loss)));
    }
    let punch = PunchConfig {
        seed: derive(seed, "prober"),
        ..cfg.punch
    };
    punch.validate()?;

    let mut net = Network::new(derive(seed, "net"));
    let link = LinkPolicy {
        latency_us: cfg.latency_us,
        ..LinkPolicy::default()
    };
    let easy = net.add_nat(NatProfile::easy(PROBER_NAT_IP))?;
    let hard = net.add_nat(NatProfile::hard(OPENER_NAT_IP).with_space(punch.space))?;
    let prober_host = net.add_host("prober", Ipv4Addr::new(192, 168, 1, 2), Some(easy), link.with_loss(cfg.loss))?;
    let opener_host = net.add_host("opener", Ipv4Addr::new(10, 0, 0, 2), Some(hard), link)?;

    let prober_port = net.bind(prober_host, Some(5000))?;
    // What an observation would have told the opener.
    let prober_ext = net.translate_outbound(prober_host, prober_port, OBSERVER)?;
    let opener_ports = (0..punch.open_ports)
        .map(|_| net.bind(opener_host, None))
        .collect::<Result<Vec<_>, _>>()?;

    let sid = session_for(seed);
    let opener = BirthdayOpener::new(sid, prober_ext, punch)?;
    let prober = BirthdayProber::new(sid, OPENER_NAT_IP, punch)?;
    let mut slots = [
        Slot::new(opener_host, opener_ports, Punch::Opener(opener)),
        Slot::new(prober_host, vec![prober_port], Punch::Prober(prober)),
    ];
    let until = SimTime::from_duration(punch.max_duration + punch.linger * 3);
    drive(&mut net, &mut slots, until)?;

    let [opener, prober] = &slots;
    let p_out = prober.machine.outcome();
    let o_out = opener.machine.outcome();
    let paths_agree = match (p_out, o_out) {
        (
            Some(PunchOutcome::Established { peer: opener_ext, .. }),
            Some(PunchOutcome::Established { socket, peer }),
        ) => {
            let mapped = net.translate_outbound(opener_host, opener.ports[socket], prober_ext)?;
            peer == prober_ext && mapped == opener_ext
        }
        _ => false,
    };
    let now = net.now();
    let live: Vec<u16> = net.nat(hard).live_mappings(now).map(|m| m.external_port).collect();
    let distinct: std::collections::BTreeSet<u16> = live.iter().copied().collect();
    let stats = prober.machine.stats();
    Ok(TrialOutcome {
        prober_established: matches!(p_out, Some(PunchOutcome::Established { .. })),
        opener_established: matches!(o_out, Some(PunchOutcome::Established { .. })),
        paths_agree,
        probes_sent: stats.probes_sent,
        elapsed_ms: stats.elapsed.as_millis() as u64,
        opener_live_mappings: live.len(),
        opener_distinct_ports: distinct.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub trials: u64,
    pub successes: u64,
    pub empirical_rate: f64,
    pub analytic_rate: f64,
    pub delta: f64,
    /// Binomial standard deviation of the empirical rate.
    pub sigma: f64,
    /// `None` when there are too few trials to judge.
    pub within_3_sigma: Option<bool>,
    pub symmetric_failures: u64,
}

impl MonteCarloSummary {
    pub fn from_counts(trials: u64, successes: u64, analytic: f64) -> Self {
        let empirical = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        let sigma = if trials == 0 {
            0.0
        } else {
            (analytic * (1.0 - analytic) / trials as f64).sqrt()
        };
        let delta = empirical - analytic;
        Self {
            trials,
            successes,
            empirical_rate: empirical,
            analytic_rate: analytic,
            delta,
            sigma,
            within_3_sigma: (trials >= MIN_TRIALS_FOR_SIGMA).then(|| delta.abs() <= 3.0 * sigma + 1e-12),
            symmetric_failures: 0,
        }
    }
}

/// Success probability the trials should converge to.
pub fn analytic_rate(cfg: &BirthdayTrialConfig) -> Result<f64, ExperimentError> {
    let p = &cfg.punch;
    let p = if cfg.loss > 0.0 {
        lossy_success_probability(p.space, p.open_ports, p.budget(), cfg.loss)?
    } else {
        success_probability(p.space, p.open_ports, p.budget())?
    };
    Ok(p.value())
}

/// Run `trials` seeded trials in parallel.
pub fn run_birthday_experiment(
    cfg: &BirthdayTrialConfig,
    trials: u64,
    master_seed: u64,
) -> Result<MonteCarloSummary, ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::Invalid("trials must be >= 1".into()));
    }
    let analytic = analytic_rate(cfg)?;
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|i| run_birthday_trial(cfg, trial_seed(master_seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let successes = outcomes.iter().filter(|o| o.prober_established).count() as u64;
    let mut summary = MonteCarloSummary::from_counts(trials, successes, analytic);
    summary.symmetric_failures = outcomes
        .iter()
        .filter(|o| o.prober_established && !(o.opener_established && o.paths_agree))
        .count() as u64;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DirectTrialOutcome {
    pub a_established: bool,
    pub b_established: bool,
    pub elapsed_ms: u64,
}

/// Two easy-NAT peers punching directly. `loss` applies to both access
/// links; `b_blocked` cuts the second peer's UDP entirely.
pub fn run_direct_trial(loss: f64, b_blocked: bool, seed: u64) -> Result<DirectTrialOutcome, ExperimentError> {
    let mut net = Network::new(derive(seed, "net"));
    let na = net.add_nat(NatProfile::easy(PROBER_NAT_IP))?;
    let nb = net.add_nat(NatProfile::easy(OPENER_NAT_IP))?;
    let link = LinkPolicy::default().with_loss(loss);
    let b_link = if b_blocked { LinkPolicy::blocked() } else { link };
    let ha = net.add_host("a", Ipv4Addr::new(192, 168, 1, 2), Some(na), link)?;
    let hb = net.add_host("b", Ipv4Addr::new(192, 168, 7, 2), Some(nb), b_link)?;
    let pa = net.bind(ha, Some(5000))?;
    let pb = net.bind(hb, Some(5000))?;
    let ea = net.translate_outbound(ha, pa, OBSERVER)?;
    let eb = net.translate_outbound(hb, pb, OBSERVER)?;
    let sid = session_for(seed);
    let mut slots = [
        Slot::new(ha, vec![pa], Punch::Direct(DirectPunch::new(sid, eb, derive(seed, "a")))),
        Slot::new(hb, vec![pb], Punch::Direct(DirectPunch::new(sid, ea, derive(seed, "b")))),
    ];
    drive(&mut net, &mut slots, SimTime::from_secs(6))?;
    let est = |s: &Slot| matches!(s.machine.outcome(), Some(PunchOutcome::Established { .. }));
    let elapsed = slots.iter().map(|s| s.machine.stats().elapsed).max().unwrap_or(Duration::ZERO);
    Ok(DirectTrialOutcome {
        a_established: est(&slots[0]),
        b_established: est(&slots[1]),
        elapsed_ms: elapsed.as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(open_ports: u32, rate: u32, secs: u64) -> BirthdayTrialConfig {
        BirthdayTrialConfig {
            punch: PunchConfig {
                open_ports,
                rate,
                max_duration: Duration::from_secs(secs),
                ..PunchConfig::default()
            },
            ..BirthdayTrialConfig::default()
        }
    }

    #[test]
    fn success_is_symmetric_and_paths_agree() {
        for seed in 0..40 {
            let o = run_birthday_trial(&cfg(256, 100, 10), seed).unwrap();
            if o.prober_established {
                assert!(o.opener_established && o.paths_agree, "seed {seed}: {o:?}");
                assert!(o.probes_sent <= 1000);
            } else {
                assert_eq!(o.probes_sent, 1000);
            }
        }
    }

    #[test]
    fn opener_mappings_stay_live_for_the_whole_window() {
        // Too few probes to hit: the trial runs to the end of the window.
        let o = run_birthday_trial(&cfg(256, 1, 20), 3).unwrap();
        assert!(!o.prober_established);
        assert_eq!(o.opener_live_mappings, 256);
        assert_eq!(o.opener_distinct_ports, 256);
        assert_eq!(o.probes_sent, 20);
    }

    #[test]
    fn same_seed_same_outcome() {
        let c = cfg(256, 100, 5);
        assert_eq!(run_birthday_trial(&c, 11).unwrap(), run_birthday_trial(&c, 11).unwrap());
    }

    #[test]
    fn small_experiment_matches_formula() {
        let s = run_birthday_experiment(&cfg(256, 100, 5), 400, 9).unwrap();
        assert_eq!(s.within_3_sigma, Some(true), "{s:?}");
        assert_eq!(s.symmetric_failures, 0);
    }

    #[test]
    fn direct_punch_cases() {
        let o = run_direct_trial(0.0, false, 1).unwrap();
        assert!(o.a_established && o.b_established);
        // Two one-way trips of 20 ms each, well within two round trips.
        assert!(o.elapsed_ms <= 80, "{o:?}");
        let o = run_direct_trial(0.0, true, 1).unwrap();
        assert!(!o.a_established && !o.b_established);
    }

    #[test]
    fn few_trials_skip_sigma() {
        let s = run_birthday_experiment(&cfg(256, 100, 10), 1, 42).unwrap();
        assert!(s.successes <= 1);
        assert_eq!(s.within_3_sigma, None);
        assert!(run_birthday_experiment(&cfg(256, 100, 10), 0, 42).is_err());
    }
}
