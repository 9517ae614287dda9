use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetError, SimTime};
use crate::probability::PortSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMode {
    EndpointIndependent,
    EndpointDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilteringMode {
    EndpointIndependent,
    AddressDependent,
    AddressAndPortDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortAllocation {
    UniformRandom,
    Sequential,
}

/// Static configuration of a simulated NAT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NatProfile {
    pub public_ip: Ipv4Addr,
    pub mapping_mode: MappingMode,
    pub filtering_mode: FilteringMode,
    pub port_alloc: PortAllocation,
    /// Seconds a mapping survives without outbound traffic.
    pub mapping_ttl: u32,
    pub alloc_space: PortSpace,
}

impl NatProfile {
    pub const DEFAULT_TTL_SECS: u32 = 30;

    /// Endpoint-independent mapping and filtering.
    pub fn easy(public_ip: Ipv4Addr) -> Self {
        Self {
            public_ip,
            mapping_mode: MappingMode::EndpointIndependent,
            filtering_mode: FilteringMode::EndpointIndependent,
            port_alloc: PortAllocation::UniformRandom,
            mapping_ttl: Self::DEFAULT_TTL_SECS,
            alloc_space: PortSpace::default(),
        }
    }

    /// Endpoint-dependent mapping with address-and-port-dependent filtering.
    pub fn hard(public_ip: Ipv4Addr) -> Self {
        Self {
            mapping_mode: MappingMode::EndpointDependent,
            filtering_mode: FilteringMode::AddressAndPortDependent,
            ..Self::easy(public_ip)
        }
    }

    pub fn with_allocation(mut self, port_alloc: PortAllocation) -> Self {
        self.port_alloc = port_alloc;
        self
    }

    pub fn with_ttl(mut self, secs: u32) -> Self {
        self.mapping_ttl = secs;
        self
    }

    pub fn with_space(mut self, space: PortSpace) -> Self {
        self.alloc_space = space;
        self
    }

    pub fn ttl(&self) -> SimTime {
        SimTime::from_secs(self.mapping_ttl as u64)
    }
}

/// Why an inbound datagram did not reach a host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    NoMapping,
    Filtered,
    Expired,
    UdpBlocked,
    Loss,
    Unbound,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::NoMapping => "no-mapping",
            DropReason::Filtered => "filtered",
            DropReason::Expired => "expired",
            DropReason::UdpBlocked => "udp-blocked",
            DropReason::Loss => "loss",
            DropReason::Unbound => "unbound",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropReason {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "no-mapping" => DropReason::NoMapping,
            "filtered" => DropReason::Filtered,
            "expired" => DropReason::Expired,
            "udp-blocked" => DropReason::UdpBlocked,
            "loss" => DropReason::Loss,
            "unbound" => DropReason::Unbound,
            _ => return Err(()),
        })
    }
}

/// One translation entry.
///
/// `remote` is set only under endpoint-dependent mapping. `permits` records
/// every remote endpoint this mapping has sent to, which is what the
/// filtering modes consult.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingEntry {
    pub internal: SocketAddrV4,
    pub remote: Option<SocketAddrV4>,
    pub external_port: u16,
    pub expiry: SimTime,
    permits: BTreeMap<SocketAddrV4, SimTime>,
}

impl MappingEntry {
    pub fn is_live(&self, now: SimTime) -> bool {
        self.expiry >= now
    }

    fn permits(&self, src: SocketAddrV4, mode: FilteringMode, now: SimTime) -> bool {
        match mode {
            FilteringMode::EndpointIndependent => true,
            FilteringMode::AddressDependent => self
                .permits
                .iter()
                .any(|(ep, exp)| ep.ip() == src.ip() && *exp >= now),
            FilteringMode::AddressAndPortDependent => {
                self.permits.get(&src).is_some_and(|exp| *exp >= now)
            }
        }
    }
}

type MappingKey = (SocketAddrV4, Option<SocketAddrV4>);

/// Runtime state of one NAT box.
///
/// Expired entries are reclaimed lazily: any lookup or allocation that meets
/// an entry whose expiry is before the current time treats it as gone.
#[derive(Debug, Clone)]
pub struct NatState {
    profile: NatProfile,
    by_key: HashMap<MappingKey, u16>,
    by_port: BTreeMap<u16, MappingEntry>,
    next_sequential: u32,
}

impl NatState {
    pub fn new(profile: NatProfile) -> Self {
        Self {
            profile,
            by_key: HashMap::new(),
            by_port: BTreeMap::new(),
            next_sequential: 0,
        }
    }

    pub fn profile(&self) -> &NatProfile {
        &self.profile
    }

    pub fn public_ip(&self) -> Ipv4Addr {
        self.profile.public_ip
    }

    /// Live mappings at `now`, ordered by external port.
    pub fn live_mappings(&self, now: SimTime) -> impl Iterator<Item = &MappingEntry> {
        self.by_port.values().filter(move |m| m.is_live(now))
    }

    pub fn mapping_for_port(&self, port: u16) -> Option<&MappingEntry> {
        self.by_port.get(&port)
    }

    fn key(&self, internal: SocketAddrV4, dst: SocketAddrV4) -> MappingKey {
        match self.profile.mapping_mode {
            MappingMode::EndpointIndependent => (internal, None),
            MappingMode::EndpointDependent => (internal, Some(dst)),
        }
    }

    fn remove_port(&mut self, port: u16) {
        if let Some(entry) = self.by_port.remove(&port) {
            self.by_key.remove(&(entry.internal, entry.remote));
        }
    }

    fn port_free(&mut self, port: u16, now: SimTime) -> bool {
        match self.by_port.get(&port) {
            None => true,
            Some(m) if !m.is_live(now) => {
                self.remove_port(port);
                true
            }
            Some(_) => false,
        }
    }

    fn allocate(&mut self, now: SimTime, rng: &mut ChaCha8Rng) -> Result<u16, NetError> {
        let space = self.profile.alloc_space;
        let k = space.size();
        match self.profile.port_alloc {
            PortAllocation::Sequential => {
                for _ in 0..k {
                    let port = space.port_at(self.next_sequential % k);
                    self.next_sequential = (self.next_sequential + 1) % k;
                    if self.port_free(port, now) {
                        return Ok(port);
                    }
                }
                Err(NetError::PortsExhausted(self.profile.public_ip))
            }
            PortAllocation::UniformRandom => {
                // Rejection sampling is uniform over free ports; fall back to
                // an explicit free list when the space is crowded.
                for _ in 0..64 {
                    let port = space.port_at(rng.gen_range(0..k));
                    if self.port_free(port, now) {
                        return Ok(port);
                    }
                }
                let free: Vec<u16> = (0..k)
                    .map(|i| space.port_at(i))
                    .filter(|&p| self.by_port.get(&p).is_none_or(|m| !m.is_live(now)))
                    .collect();
                if free.is_empty() {
                    return Err(NetError::PortsExhausted(self.profile.public_ip));
                }
                let port = free[rng.gen_range(0..free.len())];
                self.port_free(port, now);
                Ok(port)
            }
        }
    }

    /// Translate an outbound datagram from `internal` to `dst`, creating or
    /// refreshing the mapping. Returns the external source endpoint.
    pub fn outbound(
        &mut self,
        internal: SocketAddrV4,
        dst: SocketAddrV4,
        now: SimTime,
        rng: &mut ChaCha8Rng,
    ) -> Result<SocketAddrV4, NetError> {
        let key = self.key(internal, dst);
        let expiry = now + self.profile.ttl();
        if let Some(&port) = self.by_key.get(&key) {
            if self.by_port[&port].is_live(now) {
                let entry = self.by_port.get_mut(&port).expect("indexed mapping");
                entry.expiry = expiry;
                entry.permits.insert(dst, expiry);
                return Ok(SocketAddrV4::new(self.profile.public_ip, port));
            }
            self.remove_port(port);
        }
        let port = self.allocate(now, rng)?;
        let mut permits = BTreeMap::new();
        permits.insert(dst, expiry);
        self.by_key.insert(key, port);
        self.by_port.insert(
            port,
            MappingEntry {
                internal,
                remote: key.1,
                external_port: port,
                expiry,
                permits,
            },
        );
        Ok(SocketAddrV4::new(self.profile.public_ip, port))
    }

    /// Decide whether an inbound datagram from `src` to external `port` is
    /// admitted, and to which internal endpoint.
    pub fn inbound(
        &mut self,
        src: SocketAddrV4,
        port: u16,
        now: SimTime,
    ) -> Result<SocketAddrV4, DropReason> {
        let Some(entry) = self.by_port.get(&port) else {
            return Err(DropReason::NoMapping);
        };
        if !entry.is_live(now) {
            self.remove_port(port);
            return Err(DropReason::Expired);
        }
        if entry.permits(src, self.profile.filtering_mode, now) {
            Ok(entry.internal)
        } else {
            Err(DropReason::Filtered)
        }
    }
}
