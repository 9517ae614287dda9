//! Library half of the `bdmesh` binary, kept separate so the output
//! formats and the services can be tested without spawning processes.

pub mod analyze;
pub mod exit;
pub mod service;
