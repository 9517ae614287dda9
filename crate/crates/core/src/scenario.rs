//! JSON scenario files: a NAT topology, a mesh scheme and the parameters
//! of one or more realizations.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{classify_scheme, plan_links, Cidr, MeshError, MeshPlan, NodeKind, NodeSpec, SchemeParams};
use crate::netsim::{
    FilteringMode, HostId, LinkPolicy, MappingMode, NatProfile, NetError, Network, PortAllocation, SimTime, TraceMode,
};
use crate::probability::PortSpace;
use crate::rendezvous::PunchParams;
use crate::seed::trial_seed;
use crate::world::{realize, RealizationReport, RealizeConfig, RealizeError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error(transparent)]
    Unsupported(MeshError),
    #[error("simulation failed: {0}")]
    Sim(String),
}

impl ScenarioError {
    fn invalid(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

impl From<NetError> for ScenarioError {
    fn from(e: NetError) -> Self {
        ScenarioError::Sim(e.to_string())
    }
}

impl From<RealizeError> for ScenarioError {
    fn from(e: RealizeError) -> Self {
        ScenarioError::Sim(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostEntry {
    pub id: String,
    #[serde(default)]
    pub nat: Option<String>,
    #[serde(default = "default_kind")]
    pub kind: NodeKind,
    /// Defaults to 10.0.<index>.2 behind a NAT or 198.18.<index>.1 when public.
    #[serde(default)]
    pub ip: Option<Ipv4Addr>,
}

fn default_kind() -> NodeKind {
    NodeKind::Point
}

/// A NAT; omitted behaviour fields default to an easy NAT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NatEntry {
    pub id: String,
    pub public_ip: Ipv4Addr,
    #[serde(default = "default_mapping")]
    pub mapping_mode: MappingMode,
    #[serde(default = "default_filtering")]
    pub filtering_mode: FilteringMode,
    #[serde(default = "default_alloc")]
    pub port_alloc: PortAllocation,
    #[serde(default = "default_ttl")]
    pub mapping_ttl: u32,
    #[serde(default)]
    pub alloc_space: Option<PortSpace>,
}

fn default_mapping() -> MappingMode {
    MappingMode::EndpointIndependent
}

fn default_filtering() -> FilteringMode {
    FilteringMode::EndpointIndependent
}

fn default_alloc() -> PortAllocation {
    PortAllocation::UniformRandom
}

fn default_ttl() -> u32 {
    NatProfile::DEFAULT_TTL_SECS
}

impl NatEntry {
    pub fn profile(&self) -> NatProfile {
        NatProfile {
            public_ip: self.public_ip,
            mapping_mode: self.mapping_mode,
            filtering_mode: self.filtering_mode,
            port_alloc: self.port_alloc,
            mapping_ttl: self.mapping_ttl,
            alloc_space: self.alloc_space.unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub host: String,
    #[serde(default)]
    pub loss: f64,
    #[serde(default = "default_latency")]
    pub latency_us: u64,
    #[serde(default)]
    pub jitter_us: u64,
    #[serde(default)]
    pub udp_blocked: bool,
}

fn default_latency() -> u64 {
    LinkPolicy::default().latency_us
}

impl LinkEntry {
    pub fn policy(&self) -> LinkPolicy {
        LinkPolicy {
            loss_probability: self.loss,
            latency_us: self.latency_us,
            jitter_us: self.jitter_us,
            udp_blocked: self.udp_blocked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetEntry {
    pub gateway: String,
    pub cidr: Cidr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentEntry {
    #[serde(default = "one")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub punch: PunchParams,
    /// Virtual seconds each realization may run.
    #[serde(default = "default_deadline")]
    pub deadline_seconds: u32,
}

fn one() -> u32 {
    1
}

fn default_deadline() -> u32 {
    60
}

impl Default for ExperimentEntry {
    fn default() -> Self {
        Self {
            trials: 1,
            seed: 0,
            punch: PunchParams::default(),
            deadline_seconds: default_deadline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub hosts: Vec<HostEntry>,
    #[serde(default)]
    pub nats: Vec<NatEntry>,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
    pub scheme: SchemeParams,
    #[serde(default)]
    pub subnets: Vec<SubnetEntry>,
    #[serde(default)]
    pub experiment: ExperimentEntry,
}

/// Per-trial summary when a scenario asks for more than one run.
#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub connected: bool,
    pub trace_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub seed: u64,
    #[serde(flatten)]
    pub realization: RealizationReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trials: Vec<TrialSummary>,
}

impl ScenarioReport {
    /// Every run produced a connected overlay.
    pub fn connected(&self) -> bool {
        self.realization.connected && self.trials.iter().all(|t| t.connected)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl ScenarioFile {
    /// Parse and validate; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::invalid(if path == "." { "$".to_string() } else { path }, e.into_inner().to_string())
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut nat_ids = BTreeSet::new();
        let mut ips = BTreeSet::new();
        for (i, n) in self.nats.iter().enumerate() {
            if !nat_ids.insert(n.id.as_str()) {
                return Err(ScenarioError::invalid(format!("nats[{i}].id"), format!("duplicate id {:?}", n.id)));
            }
            if !ips.insert(n.public_ip) {
                return Err(ScenarioError::invalid(format!("nats[{i}].public_ip"), "address already in use"));
            }
            if let Some(space) = n.alloc_space {
                PortSpace::new(space.lo(), space.hi())
                    .map_err(|e| ScenarioError::invalid(format!("nats[{i}].alloc_space"), e.to_string()))?;
            }
            if n.mapping_ttl == 0 {
                return Err(ScenarioError::invalid(format!("nats[{i}].mapping_ttl"), "must be positive"));
            }
        }
        if self.hosts.is_empty() {
            return Err(ScenarioError::invalid("hosts", "at least one host is required"));
        }
        let mut host_ids = BTreeSet::new();
        for (i, h) in self.hosts.iter().enumerate() {
            if !host_ids.insert(h.id.as_str()) {
                return Err(ScenarioError::invalid(format!("hosts[{i}].id"), format!("duplicate id {:?}", h.id)));
            }
            if h.id.is_empty() || h.id.len() > 64 || h.id.contains(char::is_whitespace) {
                return Err(ScenarioError::invalid(
                    format!("hosts[{i}].id"),
                    "ids are 1-64 characters without whitespace",
                ));
            }
            if let Some(nat) = &h.nat {
                if !nat_ids.contains(nat.as_str()) {
                    return Err(ScenarioError::invalid(format!("hosts[{i}].nat"), format!("unknown nat {nat:?}")));
                }
            }
        }
        let mut linked = BTreeSet::new();
        for (i, l) in self.links.iter().enumerate() {
            if !host_ids.contains(l.host.as_str()) {
                return Err(ScenarioError::invalid(
                    format!("links[{i}].host"),
                    format!("unknown host {:?}", l.host),
                ));
            }
            if !linked.insert(l.host.as_str()) {
                return Err(ScenarioError::invalid(format!("links[{i}].host"), "host already has a link entry"));
            }
            if !(0.0..=1.0).contains(&l.loss) {
                return Err(ScenarioError::invalid(format!("links[{i}].loss"), "must be within [0, 1]"));
            }
        }
        for (i, s) in self.subnets.iter().enumerate() {
            match self.hosts.iter().find(|h| h.id == s.gateway) {
                None => {
                    return Err(ScenarioError::invalid(
                        format!("subnets[{i}].gateway"),
                        format!("unknown host {:?}", s.gateway),
                    ))
                }
                Some(h) if h.kind != NodeKind::Gateway => {
                    return Err(ScenarioError::invalid(
                        format!("subnets[{i}].gateway"),
                        format!("host {:?} is not a gateway", s.gateway),
                    ))
                }
                Some(_) => {}
            }
        }
        let e = &self.experiment;
        if e.trials == 0 {
            return Err(ScenarioError::invalid("experiment.trials", "must be >= 1"));
        }
        if e.deadline_seconds == 0 {
            return Err(ScenarioError::invalid("experiment.deadline_seconds", "must be positive"));
        }
        e.punch
            .to_config(0)
            .validate()
            .map_err(|err| ScenarioError::invalid("experiment.punch", err.to_string()))?;
        self.scheme
            .validate()
            .map_err(|err| ScenarioError::invalid("scheme", err.to_string()))?;
        Ok(())
    }

    /// Classify the scheme and lay out the links.
    pub fn plan(&self) -> Result<MeshPlan, ScenarioError> {
        let scheme = classify_scheme(self.scheme).map_err(ScenarioError::Unsupported)?;
        let specs: Vec<NodeSpec> = self
            .hosts
            .iter()
            .map(|h| NodeSpec {
                id: h.id.clone(),
                kind: h.kind,
                subnets: self
                    .subnets
                    .iter()
                    .filter(|s| s.gateway == h.id)
                    .map(|s| s.cidr)
                    .collect(),
            })
            .collect();
        plan_links(scheme, &specs).map_err(|e| match e {
            MeshError::UnsupportedCombination { .. } => ScenarioError::Unsupported(e),
            other => ScenarioError::invalid("hosts", other.to_string()),
        })
    }

    /// Build the simulated hosts and NATs for one run.
    pub fn build(&self, seed: u64) -> Result<(Network, BTreeMap<String, HostId>), ScenarioError> {
        let mut net = Network::new(seed).with_trace(TraceMode::Hash);
        let mut nats = BTreeMap::new();
        for n in &self.nats {
            nats.insert(n.id.as_str(), net.add_nat(n.profile())?);
        }
        let mut hosts = BTreeMap::new();
        for (i, h) in self.hosts.iter().enumerate() {
            let link = self
                .links
                .iter()
                .find(|l| l.host == h.id)
                .map(LinkEntry::policy)
                .unwrap_or_default();
            let nat = h.nat.as_deref().map(|n| nats[n]);
            let ip = h.ip.unwrap_or_else(|| {
                let i = i as u8;
                if nat.is_some() {
                    Ipv4Addr::new(10, 0, i, 2)
                } else {
                    Ipv4Addr::new(198, 18, i, 1)
                }
            });
            hosts.insert(h.id.clone(), net.add_host(h.id.clone(), ip, nat, link)?);
        }
        Ok((net, hosts))
    }

    /// Realize the plan `experiment.trials` times; the first run uses the
    /// experiment seed itself and supplies the full report.
    pub fn run(&self) -> Result<ScenarioReport, ScenarioError> {
        let plan = self.plan()?;
        let e = &self.experiment;
        let once = |seed: u64| -> Result<RealizationReport, ScenarioError> {
            let (mut net, hosts) = self.build(seed)?;
            let cfg = RealizeConfig {
                punch: e.punch,
                seed,
                deadline: SimTime::from_secs(u64::from(e.deadline_seconds)),
                ..RealizeConfig::default()
            };
            Ok(realize(&mut net, &plan, &hosts, &cfg)?)
        };
        let realization = once(e.seed)?;
        let mut trials = Vec::new();
        if e.trials > 1 {
            trials.push(TrialSummary {
                seed: e.seed,
                connected: realization.connected,
                trace_digest: realization.trace_digest.clone(),
            });
            for i in 1..e.trials {
                let seed = trial_seed(e.seed, u64::from(i));
                let r = once(seed)?;
                trials.push(TrialSummary {
                    seed,
                    connected: r.connected,
                    trace_digest: r.trace_digest,
                });
            }
        }
        Ok(ScenarioReport {
            seed: e.seed,
            realization,
            trials,
        })
    }
}

/// Scenario files shipped with the crate.
pub mod bundled {
    pub const FULLMESH5: &str = include_str!("../scenarios/fullmesh5.json");
    pub const SITE2SITE: &str = include_str!("../scenarios/site2site.json");
    pub const BLOCKED: &str = include_str!("../scenarios/blocked.json");

    pub const ALL: [(&str, &str); 3] = [
        ("fullmesh5.json", FULLMESH5),
        ("site2site.json", SITE2SITE),
        ("blocked.json", BLOCKED),
    ];
}
