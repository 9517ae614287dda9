//! The chapters of the guide in `book/`. Each one is a module here so that
//! `cargo test` runs its examples.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/probability.md")]
pub mod probability {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/traversal.md")]
pub mod traversal {}

#[doc = include_str!("../../../book/src/rendezvous.md")]
pub mod rendezvous {}

#[doc = include_str!("../../../book/src/secure-links.md")]
pub mod secure_links {}

#[doc = include_str!("../../../book/src/mesh.md")]
pub mod mesh {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

/// The scenario file schema.
pub const SCENARIO_SCHEMA: &str = include_str!("../../../book/src/scenario.schema.json");

#[doc = include_str!("../../../README.md")]
pub mod readme {}
