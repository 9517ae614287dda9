use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{Cidr, MeshError, SchemeKind};

/// Overlay addresses are handed out from here in node order.
const OVERLAY_BASE: Ipv4Addr = Ipv4Addr::new(100, 64, 0, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Point,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub subnets: Vec<Cidr>,
}

impl NodeSpec {
    pub fn point(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Point,
            subnets: Vec::new(),
        }
    }

    pub fn gateway(id: impl Into<String>, subnets: Vec<Cidr>) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Gateway,
            subnets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: String,
    pub kind: NodeKind,
    pub overlay_addr: Ipv4Addr,
    pub subnets: Vec<Cidr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkPath {
    Direct,
    Relayed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLink {
    pub a: String,
    pub b: String,
    pub encrypted: bool,
    /// What the scheme expects; realization may still end up relayed.
    pub path: LinkPath,
}

impl PlanLink {
    pub fn touches(&self, id: &str) -> bool {
        self.a == id || self.b == id
    }

    pub fn other(&self, id: &str) -> Option<&str> {
        if self.a == id {
            Some(&self.b)
        } else if self.b == id {
            Some(&self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub cidr: Cidr,
    pub via: String,
}

/// Immutable result of planning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshPlan {
    pub scheme: SchemeKind,
    pub nodes: Vec<PlanNode>,
    pub links: Vec<PlanLink>,
    pub routes: Vec<Route>,
}

impl MeshPlan {
    pub fn node(&self, id: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn linked(&self, a: &str, b: &str) -> bool {
        self.links.iter().any(|l| l.touches(a) && l.other(a) == Some(b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize")
    }
}

fn check_kinds(scheme: SchemeKind, nodes: &[NodeSpec]) -> Result<(), MeshError> {
    let points = nodes.iter().filter(|n| n.kind == NodeKind::Point).count();
    let gateways = nodes.len() - points;
    let ok = match scheme {
        SchemeKind::PointToSite => points >= 1 && gateways == 1,
        SchemeKind::SiteToSite => points == 0 && gateways == 2,
        SchemeKind::SiteMesh => points == 0 && gateways >= 2,
        SchemeKind::FullMesh => points >= 2 && gateways == 0,
    };
    if ok {
        return Ok(());
    }
    let want = match scheme {
        SchemeKind::PointToSite => "at least 1 point and exactly 1 gateway",
        SchemeKind::SiteToSite => "exactly 2 gateways",
        SchemeKind::SiteMesh => "at least 2 gateways",
        SchemeKind::FullMesh => "at least 2 points and no gateways",
    };
    Err(MeshError::NodeKindMismatch(format!(
        "{scheme} needs {want}, got {points} points and {gateways} gateways"
    )))
}

/// Build the link plan and forwarding table for `scheme` over `nodes`.
pub fn plan_links(scheme: SchemeKind, nodes: &[NodeSpec]) -> Result<MeshPlan, MeshError> {
    for (i, n) in nodes.iter().enumerate() {
        if nodes[..i].iter().any(|m| m.id == n.id) {
            return Err(MeshError::DuplicateNode(n.id.clone()));
        }
        if n.kind == NodeKind::Point && !n.subnets.is_empty() {
            return Err(MeshError::NodeKindMismatch(format!("point {} cannot advertise subnets", n.id)));
        }
    }
    check_kinds(scheme, nodes)?;
    let overlay_range = Cidr::new(OVERLAY_BASE, 16).expect("canonical");
    let all: Vec<Cidr> = nodes.iter().flat_map(|n| n.subnets.iter().copied()).collect();
    for (i, a) in all.iter().enumerate() {
        if a.overlaps(&overlay_range) {
            return Err(MeshError::OverlappingSubnets(*a, overlay_range));
        }
        if let Some(b) = all[..i].iter().find(|b| a.overlaps(b)) {
            return Err(MeshError::OverlappingSubnets(*b, *a));
        }
    }

    let plan_nodes: Vec<PlanNode> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| PlanNode {
            id: n.id.clone(),
            kind: n.kind,
            overlay_addr: Ipv4Addr::from(u32::from(OVERLAY_BASE) + i as u32 + 1),
            subnets: n.subnets.clone(),
        })
        .collect();

    let params = scheme.params();
    let path = if params.p == 1 { LinkPath::Direct } else { LinkPath::Relayed };
    let link = |a: &PlanNode, b: &PlanNode| PlanLink {
        a: a.id.clone(),
        b: b.id.clone(),
        encrypted: scheme.encrypted(),
        path,
    };
    let mut links = Vec::new();
    match scheme {
        SchemeKind::PointToSite => {
            let gw = plan_nodes.iter().find(|n| n.kind == NodeKind::Gateway).expect("checked");
            for p in plan_nodes.iter().filter(|n| n.kind == NodeKind::Point) {
                links.push(link(p, gw));
            }
        }
        SchemeKind::SiteToSite | SchemeKind::SiteMesh | SchemeKind::FullMesh => {
            for (i, a) in plan_nodes.iter().enumerate() {
                for b in &plan_nodes[i + 1..] {
                    links.push(link(a, b));
                }
            }
        }
    }

    let mut routes: Vec<Route> = plan_nodes
        .iter()
        .map(|n| Route {
            cidr: Cidr::host(n.overlay_addr),
            via: n.id.clone(),
        })
        .collect();
    for n in &plan_nodes {
        routes.extend(n.subnets.iter().map(|c| Route {
            cidr: *c,
            via: n.id.clone(),
        }));
    }

    Ok(MeshPlan {
        scheme,
        nodes: plan_nodes,
        links,
        routes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "node")]
pub enum NextHop {
    /// The destination is this node or inside a subnet it advertises.
    Local,
    Peer(String),
}

/// Where `from` should send traffic for `dst`: longest prefix wins, and a
/// destination behind a node `from` has no link to goes through a gateway
/// linked to both.
pub fn route_lookup(plan: &MeshPlan, from: &str, dst: Ipv4Addr) -> Result<NextHop, MeshError> {
    if plan.node(from).is_none() {
        return Err(MeshError::UnknownNode(from.to_string()));
    }
    let owner = plan
        .routes
        .iter()
        .filter(|r| r.cidr.contains(dst))
        .max_by_key(|r| r.cidr.prefix())
        .map(|r| r.via.as_str())
        .ok_or(MeshError::NoRoute(dst))?;
    if owner == from {
        return Ok(NextHop::Local);
    }
    if plan.linked(from, owner) {
        return Ok(NextHop::Peer(owner.to_string()));
    }
    plan.nodes
        .iter()
        .find(|g| g.kind == NodeKind::Gateway && plan.linked(from, &g.id) && plan.linked(&g.id, owner))
        .map(|g| NextHop::Peer(g.id.clone()))
        .ok_or(MeshError::NoRoute(dst))
}
