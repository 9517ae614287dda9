use super::*;
use crate::mesh::{plan_links, NodeSpec};
use crate::netsim::{NatProfile, TraceMode};

#[derive(Clone, Copy)]
enum Edge {
    Public,
    Easy,
    Hard,
    Blocked,
}

fn build(seed: u64, nodes: &[(&str, Edge)]) -> (Network, BTreeMap<String, HostId>) {
    let mut net = Network::new(seed).with_trace(TraceMode::Hash);
    let mut hosts = BTreeMap::new();
    for (i, &(id, edge)) in nodes.iter().enumerate() {
        let public = Ipv4Addr::new(198, 51, 100, 10 + i as u8);
        let private = Ipv4Addr::new(10, 0, i as u8, 2);
        let host = match edge {
            Edge::Public => net.add_host(id, public, None, LinkPolicy::default()),
            Edge::Easy | Edge::Blocked => {
                let nat = net.add_nat(NatProfile::easy(public)).unwrap();
                let link = if matches!(edge, Edge::Blocked) { LinkPolicy::blocked() } else { LinkPolicy::default() };
                net.add_host(id, private, Some(nat), link)
            }
            Edge::Hard => {
                let nat = net.add_nat(NatProfile::hard(public)).unwrap();
                net.add_host(id, private, Some(nat), LinkPolicy::default())
            }
        }
        .unwrap();
        hosts.insert(id.to_string(), host);
    }
    (net, hosts)
}

fn run(scheme: SchemeKind, specs: Vec<NodeSpec>, edges: &[Edge], seed: u64) -> RealizationReport {
    let plan = plan_links(scheme, &specs).unwrap();
    let named: Vec<(&str, Edge)> = specs.iter().map(|s| s.id.as_str()).zip(edges.iter().copied()).collect();
    let (mut net, hosts) = build(seed, &named);
    let cfg = RealizeConfig { seed, ..RealizeConfig::default() };
    realize(&mut net, &plan, &hosts, &cfg).unwrap()
}

fn points(n: usize) -> Vec<NodeSpec> {
    (0..n).map(|i| NodeSpec::point(format!("n{i}"))).collect()
}

#[test]
fn easy_full_mesh_is_direct_and_encrypted() {
    let r = run(SchemeKind::FullMesh, points(3), &[Edge::Easy, Edge::Public, Edge::Easy], 1);
    assert_eq!(r.links.len(), 3);
    for l in &r.links {
        assert_eq!(l.path, LinkOutcome::Direct, "{}", r.to_json());
        assert!(l.handshake_ok && l.marker_delivered && l.ping_ok, "{}", r.to_json());
        assert!(!l.marker_visible);
    }
    assert!(r.connected);
    assert!(r.dead_links.is_empty() && r.leaks.is_empty() && r.warnings.is_empty());
    assert!(r.nodes.iter().all(|n| n.nat_class.is_reachable()));
}

#[test]
fn blocked_node_is_relayed_but_connected() {
    let r = run(SchemeKind::FullMesh, points(3), &[Edge::Easy, Edge::Easy, Edge::Blocked], 2);
    assert_eq!(r.nodes[2].nat_class, NatClass::UdpBlocked);
    let l = r.link("n0", "n2").unwrap();
    assert_eq!(l.path, LinkOutcome::Relayed, "{}", r.to_json());
    assert_eq!(l.roles, [Some(Role::Relay), Some(Role::Relay)]);
    assert_eq!(l.bulk_ok, Some(true));
    assert!(l.handshake_ok);
    assert_eq!(r.link("n0", "n1").unwrap().path, LinkOutcome::Direct);
    assert!(r.connected, "{}", r.to_json());
    assert!(r.leaks.is_empty());
}

#[test]
fn hard_nat_link_uses_birthday_punch() {
    let r = run(SchemeKind::FullMesh, points(2), &[Edge::Easy, Edge::Hard], 3);
    assert_eq!(r.nodes[1].nat_class, NatClass::Hard);
    let l = &r.links[0];
    assert_eq!(l.roles, [Some(Role::Prober), Some(Role::Opener)]);
    assert_eq!(l.path, LinkOutcome::Direct, "{}", r.to_json());
    assert!(l.probes_sent > 0 && l.handshake_ok && l.ping_ok);
}

#[test]
fn two_hard_nats_fall_back_to_relay() {
    let r = run(SchemeKind::FullMesh, points(2), &[Edge::Hard, Edge::Hard], 4);
    let l = &r.links[0];
    assert_eq!(l.path, LinkOutcome::Relayed);
    assert_eq!(l.bulk_ok, Some(true));
    assert!(r.connected);
}

#[test]
fn site_to_site_routes_subnets_in_plaintext() {
    let specs = vec![
        NodeSpec::gateway("east", vec!["10.10.0.0/24".parse().unwrap()]),
        NodeSpec::gateway("west", vec!["10.20.0.0/24".parse().unwrap()]),
    ];
    let r = run(SchemeKind::SiteToSite, specs, &[Edge::Easy, Edge::Public], 5);
    assert!(r.connected, "{}", r.to_json());
    let subnet_ping = |from: &str, dst: Ipv4Addr| r.pings.iter().any(|p| p.from == from && p.dst == dst && p.ok);
    assert!(subnet_ping("east", Ipv4Addr::new(10, 20, 0, 1)));
    assert!(subnet_ping("west", Ipv4Addr::new(10, 10, 0, 1)));
    assert_eq!(r.warnings.len(), 1);
    let l = &r.links[0];
    assert!(!l.encrypted && l.marker_visible && l.leaks_none(&r));
}

#[test]
fn point_to_site_reaches_subnet_through_gateway() {
    let specs = vec![
        NodeSpec::point("laptop"),
        NodeSpec::point("phone"),
        NodeSpec::gateway("office", vec!["172.16.5.0/24".parse().unwrap()]),
    ];
    let r = run(SchemeKind::PointToSite, specs, &[Edge::Easy, Edge::Hard, Edge::Public], 6);
    assert!(r.connected, "{}", r.to_json());
    assert_eq!(r.links.len(), 2);
    for from in ["laptop", "phone"] {
        assert!(r.pings.iter().any(|p| p.from == from && p.dst == Ipv4Addr::new(172, 16, 5, 1) && p.ok));
    }
}

#[test]
fn same_seed_same_trace() {
    let a = run(SchemeKind::FullMesh, points(3), &[Edge::Easy, Edge::Hard, Edge::Blocked], 9);
    let b = run(SchemeKind::FullMesh, points(3), &[Edge::Easy, Edge::Hard, Edge::Blocked], 9);
    assert_eq!(a.trace_digest, b.trace_digest);
    let c = run(SchemeKind::FullMesh, points(3), &[Edge::Easy, Edge::Hard, Edge::Blocked], 10);
    assert_ne!(a.trace_digest, c.trace_digest);
}

#[test]
fn missing_host_is_an_error() {
    let plan = plan_links(SchemeKind::FullMesh, &points(2)).unwrap();
    let mut net = Network::new(0);
    let err = realize(&mut net, &plan, &BTreeMap::new(), &RealizeConfig::default()).unwrap_err();
    assert!(matches!(err, RealizeError::MissingHost(_)));
}

impl LinkReport {
    fn leaks_none(&self, r: &RealizationReport) -> bool {
        !r.leaks.contains(&self.name())
    }
}

