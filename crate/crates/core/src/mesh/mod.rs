//! Overlay schemes and link plans.

mod cidr;
mod plan;
mod scheme;

use std::net::Ipv4Addr;

use thiserror::Error;

pub use cidr::Cidr;
pub use plan::{plan_links, route_lookup, LinkPath, MeshPlan, NextHop, NodeKind, NodeSpec, PlanLink, PlanNode, Route};
pub use scheme::{classify_scheme, SchemeKind, SchemeParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeshError {
    #[error("{field} must be 0 or 1, got {value}")]
    NotBinary { field: &'static str, value: u8 },
    #[error("unsupported-combination {params}; nearest supported scheme is {nearest} {}", nearest.params())]
    UnsupportedCombination { params: SchemeParams, nearest: SchemeKind },
    #[error("node-kind mismatch: {0}")]
    NodeKindMismatch(String),
    #[error("overlapping subnets {0} and {1}")]
    OverlappingSubnets(Cidr, Cidr),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("invalid CIDR {0:?}")]
    InvalidCidr(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("no-route to {0}")]
    NoRoute(Ipv4Addr),
}
