//! Realizing a [`MeshPlan`] inside the simulator: a coordinator host, one
//! agent per node, and a report of what actually came up.

mod agent;
pub mod app;
pub mod sniff;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::mesh::{Cidr, LinkPath, MeshPlan, NodeKind, Route, SchemeKind};
use crate::netsim::{HostEvent, HostId, LinkPolicy, NetError, Network, SimTime};
use crate::rendezvous::{ConnId, Coordinator, CoordinatorConfig, Outbound, PunchParams};
use crate::secure::{HandshakeFailure, IdentityKey};
use crate::seed::derive;
use crate::traversal::{NatClass, Role, SessionState};
use agent::{Agent, Ctx};
use sniff::{contains, observable_payloads, Components};

pub const COORDINATOR_PORTS: [u16; 2] = [3478, 3479];
/// Port every agent uses for control-adjacent UDP and direct punching.
pub const AGENT_PORT: u16 = 7000;

#[derive(Debug, Error)]
pub enum RealizeError {
    #[error("plan node {0} has no simulated host")]
    MissingHost(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone)]
pub struct RealizeConfig {
    pub punch: PunchParams,
    pub seed: u64,
    pub deadline: SimTime,
    /// Bytes pushed through every relayed link; 0 disables the check.
    pub bulk_bytes: usize,
    pub coordinator_ip: Ipv4Addr,
    /// Record traffic so the report can say what an observer saw.
    pub sniff: bool,
}

impl Default for RealizeConfig {
    fn default() -> Self {
        Self {
            punch: PunchParams::default(),
            seed: 0,
            deadline: SimTime::from_secs(60),
            bulk_bytes: 64 * 1024,
            coordinator_ip: Ipv4Addr::new(192, 0, 2, 1),
            sniff: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkOutcome {
    Direct,
    Relayed,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeReport {
    pub id: String,
    pub kind: NodeKind,
    pub overlay_addr: Ipv4Addr,
    pub nat_class: NatClass,
    pub subnets: Vec<Cidr>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkReport {
    pub a: String,
    pub b: String,
    pub encrypted: bool,
    pub planned_path: LinkPath,
    pub path: LinkOutcome,
    pub roles: [Option<Role>; 2],
    pub states: [Option<SessionState>; 2],
    pub probes_sent: u64,
    pub elapsed_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
    pub handshake_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub handshake_failure: Option<HandshakeFailure>,
    pub marker_delivered: bool,
    pub ping_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bulk_ok: Option<bool>,
    /// Marker visible to an on-path observer.
    pub marker_visible: bool,
}

impl LinkReport {
    /// Up, authenticated where required, and carrying traffic both ways.
    pub fn is_alive(&self) -> bool {
        self.path != LinkOutcome::Failed
            && (!self.encrypted || self.handshake_ok)
            && self.marker_delivered
            && self.ping_ok
            && self.bulk_ok != Some(false)
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.a, self.b)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PingReport {
    pub from: String,
    pub dst: Ipv4Addr,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationReport {
    pub scheme: SchemeKind,
    pub nodes: Vec<NodeReport>,
    pub links: Vec<LinkReport>,
    pub routes: Vec<Route>,
    pub pings: Vec<PingReport>,
    pub connected: bool,
    pub dead_links: Vec<String>,
    /// Encrypted links whose marker an observer could read.
    pub leaks: Vec<String>,
    pub warnings: Vec<String>,
    pub captured: usize,
    pub sim_time_ms: u64,
    pub trace_digest: String,
}

impl RealizationReport {
    pub fn link(&self, a: &str, b: &str) -> Option<&LinkReport> {
        self.links
            .iter()
            .find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Run the plan on already-built hosts until `cfg.deadline`.
pub fn realize(
    net: &mut Network,
    plan: &MeshPlan,
    hosts: &BTreeMap<String, HostId>,
    cfg: &RealizeConfig,
) -> Result<RealizationReport, RealizeError> {
    for n in &plan.nodes {
        if !hosts.contains_key(&n.id) {
            return Err(RealizeError::MissingHost(n.id.clone()));
        }
    }
    if cfg.sniff {
        net.enable_capture();
    }
    let coord_host = net.add_host("coordinator", cfg.coordinator_ip, None, LinkPolicy::default())?;
    for p in COORDINATOR_PORTS {
        net.bind(coord_host, Some(p))?;
    }
    let observers = COORDINATOR_PORTS.map(|p| SocketAddrV4::new(cfg.coordinator_ip, p));
    let mut coord = Coordinator::new(CoordinatorConfig {
        punch: cfg.punch,
        seed: derive(cfg.seed, "coordinator"),
        ..CoordinatorConfig::default()
    });

    let mut agents: Vec<Agent> = Vec::new();
    for n in &plan.nodes {
        let host = hosts[&n.id];
        let node_seed = derive(cfg.seed, &n.id);
        let identity = IdentityKey::generate(&mut ChaCha8Rng::seed_from_u64(derive(node_seed, "identity")));
        let port = net.bind(host, Some(AGENT_PORT))?;
        agents.push(Agent::new(n.id.clone(), host, identity, node_seed, port, n.overlay_addr));
    }
    let by_host: BTreeMap<HostId, usize> = agents.iter().enumerate().map(|(i, a)| (a.host, i)).collect();

    let mut ctx = Ctx {
        net,
        plan,
        coord: coord_host,
        observers,
        bulk_bytes: cfg.bulk_bytes,
    };
    for a in &mut agents {
        a.start(&mut ctx);
    }
    while let Some(ev) = ctx.net.next_event(cfg.deadline) {
        let host = ev.host();
        if host == coord_host {
            let now = ctx.net.now().as_duration();
            let out = match ev {
                HostEvent::Message { from, payload, .. } => {
                    let Some(&i) = by_host.get(&from) else { continue };
                    let src = ctx.net.translate_outbound(from, agents[i].punch_port, observers[0])?;
                    let line = String::from_utf8_lossy(&payload);
                    coord.handle_line(now, ConnId(from.0 as u64), src, line.trim_end())
                }
                HostEvent::Datagram {
                    local_port,
                    from,
                    payload,
                    ..
                } => {
                    let listener = usize::from(local_port == COORDINATOR_PORTS[1]);
                    coord.handle_datagram(now, listener, from, &payload)
                }
                HostEvent::Timer { .. } => Vec::new(),
            };
            for o in out {
                match o {
                    Outbound::Control { conn, msg } => {
                        ctx.net
                            .send_message(coord_host, HostId(conn.0 as usize), msg.to_line().into_bytes())
                    }
                    Outbound::Datagram { listener, dst, msg } => {
                        let _ = ctx
                            .net
                            .send(coord_host, COORDINATOR_PORTS[listener], dst, msg.to_line().into_bytes());
                    }
                }
            }
        } else if let Some(&i) = by_host.get(&host) {
            agents[i].on_event(&mut ctx, ev);
        }
    }
    let net = ctx.net;
    Ok(build_report(net, plan, &agents))
}

fn build_report(net: &Network, plan: &MeshPlan, agents: &[Agent]) -> RealizationReport {
    let agent = |id: &str| agents.iter().find(|a| a.id == id).expect("agent per node");
    let nodes = plan
        .nodes
        .iter()
        .map(|n| {
            let a = agent(&n.id);
            NodeReport {
                id: n.id.clone(),
                kind: n.kind,
                overlay_addr: n.overlay_addr,
                nat_class: a.nat_class,
                subnets: n.subnets.clone(),
                errors: a.errors.clone(),
            }
        })
        .collect();

    let seen = observable_payloads(net.captured());
    let visible = |m: &[u8]| seen.iter().any(|p| contains(p, m));
    let mut links = Vec::new();
    for l in &plan.links {
        let (aa, ab) = (agent(&l.a), agent(&l.b));
        let sides = [aa.session_with(&l.b), ab.session_with(&l.a)];
        let states = sides.map(|s| s.map(|s| s.ts.state()));
        let path = match states {
            [Some(SessionState::EstablishedDirect), Some(SessionState::EstablishedDirect)] => LinkOutcome::Direct,
            [Some(SessionState::EstablishedRelayed), Some(SessionState::EstablishedRelayed)]
                if sides.iter().all(|s| s.is_some_and(|s| s.is_relayed())) =>
            {
                LinkOutcome::Relayed
            }
            _ => LinkOutcome::Failed,
        };
        let both = |f: &dyn Fn(&agent::LinkSession) -> bool| sides.iter().all(|s| s.is_some_and(f));
        let marker_delivered = sides[0]
            .zip(sides[1])
            .is_some_and(|(x, y)| x.marker_received.as_ref() == Some(&y.marker_sent) && y.marker_received.as_ref() == Some(&x.marker_sent));
        let ping_ok = [(aa, &l.b), (ab, &l.a)].iter().all(|(from, to)| {
            let dst = plan.node(to).expect("planned node").overlay_addr;
            from.pings.iter().any(|p| p.dst == dst && p.ok)
        });
        let bulk_ok = (path == LinkOutcome::Relayed).then(|| both(&|s| s.bulk_ok == Some(true)));
        let stats = sides.map(|s| s.map(|s| s.ts.stats()).unwrap_or_default());
        let fallback_reason = sides.iter().flatten().find_map(|s| {
            s.ts.fallback_reason()
                .map(|r| r.to_string())
                .or_else(|| s.peer_fallback.then(|| "peer".to_string()))
        });
        links.push(LinkReport {
            a: l.a.clone(),
            b: l.b.clone(),
            encrypted: l.encrypted,
            planned_path: l.path,
            path,
            roles: sides.map(|s| s.map(|s| s.role)),
            states,
            probes_sent: stats.iter().map(|s| u64::from(s.probes_sent)).sum(),
            elapsed_ms: stats.iter().map(|s| s.elapsed.as_millis() as u64).max().unwrap_or(0),
            fallback_reason,
            handshake_ok: l.encrypted && both(&|s| s.handshake_ok()),
            handshake_failure: sides.iter().flatten().find_map(|s| s.handshake_failure()),
            marker_delivered,
            ping_ok,
            bulk_ok,
            marker_visible: sides.iter().flatten().any(|s| visible(&s.marker_sent)),
        });
    }

    let mut comps = Components::new(plan.nodes.len());
    let index = |id: &str| plan.nodes.iter().position(|n| n.id == id).expect("planned node");
    for l in links.iter().filter(|l| l.is_alive()) {
        comps.union(index(&l.a), index(&l.b));
    }
    let connected = comps.count() <= 1;

    let pings = agents
        .iter()
        .flat_map(|a| {
            a.pings.iter().map(|p| PingReport {
                from: a.id.clone(),
                dst: p.dst,
                ok: p.ok,
            })
        })
        .collect();
    let mut warnings = Vec::new();
    if !plan.scheme.encrypted() {
        warnings.push(format!(
            "scheme {} has theta=0: overlay traffic is not encrypted",
            plan.scheme.name()
        ));
    }
    RealizationReport {
        scheme: plan.scheme,
        nodes,
        dead_links: links.iter().filter(|l| !l.is_alive()).map(LinkReport::name).collect(),
        leaks: links
            .iter()
            .filter(|l| l.encrypted && l.marker_visible)
            .map(LinkReport::name)
            .collect(),
        links,
        routes: plan.routes.clone(),
        pings,
        connected,
        warnings,
        captured: net.captured().len(),
        sim_time_ms: net.now().as_micros() / 1000,
        trace_digest: net.trace().digest(),
    }
}

#[cfg(test)]
mod tests;
