//! Multitier federated learning simulator: ultra-constrained devices (UCDs)
//! paired with access points (APs) and a server.

pub mod config;
pub mod cost;
pub mod datagen;
pub mod experiment;
pub mod fedsim;
pub mod mobility;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod selector;
