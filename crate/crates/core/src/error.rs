use std::path::PathBuf;

use thiserror::Error;

use crate::address_space::PhysicalFrame;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("page size must be positive")]
    ZeroPageSize,
    #[error("{tier} capacity {capacity} is not a multiple of the page size {page_size}")]
    NotPageMultiple {
        tier: &'static str,
        capacity: u64,
        page_size: u64,
    },
    #[error("geometry needs at least one page in each tier")]
    EmptyTier,
    #[error("unified page {ua} out of range (total {total})")]
    UaOutOfRange { ua: u64, total: u64 },
    #[error("frame {frame} out of range")]
    FrameOutOfRange { frame: PhysicalFrame },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranslationError {
    #[error("page fault on vpn {0:#x}")]
    PageFault(u64),
    #[error("vpn {0:#x} is already under migration")]
    Conflict(u64),
    #[error("vpn {vpn:#x}: {reason}")]
    State { vpn: u64, reason: &'static str },
    #[error("no resident page to evict and no free unified page")]
    Capacity,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing or unsupported trace header (expected `{expected}`), found `{found}`")]
    Version { expected: &'static str, found: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid trace spec: {0}")]
    Spec(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown preset `{0}` (expected config1, config2 or config3)")]
    UnknownPreset(String),
    #[error("bad override `{0}`: expected KEY=VALUE")]
    BadOverride(String),
    #[error("{0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Failures that abort a simulation run.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("consistency failure at event {event} (core {core}, vpn {vpn:#x}, addr {vaddr:#x}): expected {expected:#x}, got {got:#x}")]
    Consistency {
        event: u64,
        core: usize,
        vpn: u64,
        vaddr: u64,
        expected: u64,
        got: u64,
    },
    #[error("final memory image differs at addr {vaddr:#x}: expected {expected:#x}, got {got:#x}")]
    FinalImage { vaddr: u64, expected: u64, got: u64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("trace names core {core} but the system has {cores} cores")]
    CoreOutOfRange { core: usize, cores: usize },
    #[error(transparent)]
    Translation(#[from] TranslationError),
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("IPC undefined: core {0} ran zero cycles")]
    ZeroCycles(usize),
}
