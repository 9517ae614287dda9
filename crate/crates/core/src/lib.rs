pub mod experiment;
pub mod mesh;
pub mod netsim;
pub mod probability;
pub mod rendezvous;
pub mod scenario;
pub mod secure;
pub mod seed;
pub mod traversal;
pub mod world;
