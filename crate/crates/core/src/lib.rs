//! Flat-address-space hybrid memory simulator with hardware page migration.

pub mod address_space;
pub mod cache;
pub mod coherence;
pub mod config;
pub mod engine;
pub mod error;
pub mod machine;
pub mod memory;
pub mod migration;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod translation;
pub mod workload;
