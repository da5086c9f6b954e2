//! Simulator configuration: the engine-facing [`SimConfig`], device latency
//! derivation, and the JSON experiment document with presets and overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::address_space::MemoryGeometry;
use crate::cache::CacheConfig;
use crate::coherence::TcmConfig;
use crate::error::ConfigError;
use crate::memory::AllocPolicy;
use crate::policy::{PolicyConfig, PolicyKind};
use crate::workload::{Pattern, TraceSpec};

/// Device access latencies in core cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyTable {
    pub fast_read: u64,
    pub fast_write: u64,
    pub slow_read: u64,
    pub slow_write: u64,
    pub buffer_access: u64,
    pub page_walk: u64,
    /// Second extended-TLB access on an LLC miss.
    pub ext_lookup: u64,
    /// Fixed OS cost of servicing a page fault.
    #[serde(default = "default_page_fault")]
    pub page_fault: u64,
}

fn default_page_fault() -> u64 {
    1000
}

impl LatencyTable {
    pub fn zero() -> Self {
        Self {
            fast_read: 0,
            fast_write: 0,
            slow_read: 0,
            slow_write: 0,
            buffer_access: 0,
            page_walk: 0,
            ext_lookup: 0,
            page_fault: 0,
        }
    }

    pub fn for_devices(fast: Device, slow: Device, freq_ghz: f64) -> Self {
        let (fr, fw) = fast.timing_ns();
        let (sr, sw) = slow.timing_ns();
        Self {
            fast_read: ns_to_cycles(fr, freq_ghz),
            fast_write: ns_to_cycles(fw, freq_ghz),
            slow_read: ns_to_cycles(sr, freq_ghz),
            slow_write: ns_to_cycles(sw, freq_ghz),
            buffer_access: 10,
            page_walk: 100,
            ext_lookup: 1,
            page_fault: default_page_fault(),
        }
    }
}

impl Default for LatencyTable {
    fn default() -> Self {
        Self::for_devices(Device::Hbm, Device::Pcm, 3.2)
    }
}

/// Converts a device latency to core cycles, rounding partial cycles up.
/// Products within 1e-9 of an integer count as exact.
pub fn ns_to_cycles(ns: f64, freq_ghz: f64) -> u64 {
    let x = ns * freq_ghz;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as u64
    } else {
        x.ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Device {
    /// tCAS-tRCD 14 ns-14 ns; flat access = tRCD + tCAS.
    Hbm,
    /// tCAS-tRCD 16 ns-16 ns.
    Ddr4,
    /// 80 ns read, 250 ns write.
    Pcm,
}

impl Device {
    /// (read, write) in nanoseconds.
    pub fn timing_ns(&self) -> (f64, f64) {
        match self {
            Device::Hbm => (28.0, 28.0),
            Device::Ddr4 => (32.0, 32.0),
            Device::Pcm => (80.0, 250.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub remap_capacity: usize,
    pub shootdown_cost: u64,
    pub line_invalidate_cost: u64,
    /// Charge the per-line cost for every line of a reconciled page, cached
    /// or not.
    pub charge_absent_lines: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            remap_capacity: 4096,
            shootdown_cost: 4000,
            line_invalidate_cost: 20,
            charge_absent_lines: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationConfig {
    pub queue_capacity: usize,
    /// Accesses to a migrating page wait for the whole job to retire.
    pub blocking: bool,
    /// Demand accesses to a tier the job is using also wait half a transfer
    /// slot. Off by default.
    pub contention: bool,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 64,
            blocking: false,
            contention: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocKind {
    Sequential,
    Random,
}

impl From<AllocKind> for AllocPolicy {
    fn from(k: AllocKind) -> Self {
        match k {
            AllocKind::Sequential => AllocPolicy::Sequential,
            AllocKind::Random => AllocPolicy::Random,
        }
    }
}

/// Everything one simulation run needs besides the traces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cores: usize,
    pub core_freq_ghz: f64,
    pub geometry: MemoryGeometry,
    pub cache: CacheConfig,
    pub policy: PolicyConfig,
    pub latencies: LatencyTable,
    pub seed: u64,
    pub tlb_entries: usize,
    pub alloc: AllocKind,
    pub tcm: TcmConfig,
    pub baseline: BaselineConfig,
    pub migration: MigrationConfig,
}

impl SimConfig {
    pub fn epoch_cycles(&self) -> u64 {
        (self.policy.epoch_us * self.core_freq_ghz * 1000.0).round() as u64
    }

    pub fn lines_per_page(&self) -> u32 {
        (self.geometry.page_size / self.cache.line_size) as u32
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = ConfigError::invalid;
        if self.cores == 0 {
            return Err(inv("system.cores", "must be at least 1"));
        }
        if !(self.core_freq_ghz > 0.0 && self.core_freq_ghz.is_finite()) {
            return Err(inv("system.core_freq_ghz", "must be positive"));
        }
        self.geometry
            .require_nonempty()
            .map_err(|e| ConfigError::invalid("geometry", e.to_string()))?;
        let c = &self.cache;
        if c.line_size != 64 {
            return Err(inv("cache.line_size", "only 64-byte lines are modeled"));
        }
        if !self.geometry.page_size.is_multiple_of(c.line_size) || self.geometry.page_size < c.line_size {
            return Err(inv("geometry.page", "must be a multiple of the line size"));
        }
        for (name, size, assoc) in [
            ("cache.l1_size", c.l1_size, c.l1_assoc),
            ("cache.llc_size", c.llc_size, c.llc_assoc),
        ] {
            if assoc == 0 || size == 0 || size % (assoc * c.line_size) != 0 {
                return Err(inv(name, "must be a positive multiple of assoc x line_size"));
            }
        }
        let p = &self.policy;
        if p.threshold == 0 {
            return Err(inv("policy.threshold", "must be at least 1"));
        }
        if !(p.epoch_us > 0.0 && p.epoch_us.is_finite()) || self.epoch_cycles() == 0 {
            return Err(inv("policy.epoch_us", "must be positive"));
        }
        if p.adapt_min == 0 || p.adapt_min > p.adapt_max {
            return Err(inv(
                "policy.adapt_min",
                "adapt bounds must satisfy 1 <= adapt_min <= adapt_max",
            ));
        }
        if p.adapt_period == 0 {
            return Err(inv("policy.adapt_period", "must be at least 1"));
        }
        if self.tlb_entries == 0 {
            return Err(inv("system.tlb_entries", "must be at least 1"));
        }
        if self.baseline.remap_capacity < 2 {
            return Err(inv("baseline.remap_capacity", "must hold at least one pair swap"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Experiment document

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub cores: usize,
    pub core_freq_ghz: f64,
    pub seed: u64,
    pub tlb_entries: usize,
    pub alloc: AllocKind,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            cores: 16,
            core_freq_ghz: 3.2,
            seed: 0,
            tlb_entries: 4096,
            alloc: AllocKind::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(deserialize_with = "de_size")]
    pub fast: u64,
    #[serde(deserialize_with = "de_size")]
    pub slow: u64,
    #[serde(deserialize_with = "de_size", default = "default_page")]
    pub page: u64,
}

fn default_page() -> u64 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub spec: Option<TraceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSection,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub latencies: LatencyTable,
    #[serde(default)]
    pub tcm: TcmConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub migration: MigrationConfig,
    pub trace: TraceSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parses sizes such as `4096`, `"4KiB"`, `"256MB"` or `"16GiB"`. Binary and
/// decimal suffixes both mean powers of 1024.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("bad size `{s}`"))?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        _ => return Err(format!("unknown size unit in `{s}`")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("size `{s}` overflows"))
}

fn de_size<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(n) => Ok(n),
        Raw::Str(s) => parse_size(&s).map_err(serde::de::Error::custom),
    }
}

pub const PRESETS: [&str; 3] = ["config1", "config2", "config3"];

impl ExperimentConfig {
    /// The three evaluated systems: 1 GiB HBM + 16 GiB PCM, 256 MiB HBM +
    /// 16 GiB PCM, and 1 GiB HBM + 16 GiB DDR4.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (fast, slow) = match name {
            "config1" => (1u64 << 30, Device::Pcm),
            "config2" => (256 << 20, Device::Pcm),
            "config3" => (1 << 30, Device::Ddr4),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        let system = SystemSection::default();
        Ok(Self {
            latencies: LatencyTable::for_devices(Device::Hbm, slow, system.core_freq_ghz),
            system,
            geometry: GeometrySection {
                fast,
                slow: 16 << 30,
                page: 4096,
            },
            cache: CacheConfig::default(),
            policy: PolicyConfig::default(),
            tcm: TcmConfig::default(),
            baseline: BaselineConfig::default(),
            migration: MigrationConfig::default(),
            trace: TraceSection {
                file: None,
                spec: Some(TraceSpec {
                    pattern: Pattern::Zipf { s: 1.0 },
                    footprint_pages: 8192,
                    events_per_core: 5000,
                    write_ratio: 0.3,
                    mean_icount: 4.0,
                    seed: 0,
                    page_size: 4096,
                }),
            },
            output: OutputSection::default(),
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(path_error)?;
        cfg.to_sim()?;
        Ok(cfg)
    }

    fn from_value(v: Value) -> Result<Self, ConfigError> {
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(path_error)?;
        cfg.to_sim()?;
        Ok(cfg)
    }

    /// A preset name or a JSON file path.
    pub fn load(source: &str) -> Result<Self, ConfigError> {
        if PRESETS.contains(&source) {
            return Self::preset(source);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values that parse as JSON are used
    /// as such, anything else is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, val) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(o.to_string()))?;
            set_path(&mut v, key.trim(), parse_value(val.trim()))?;
        }
        Self::from_value(v)
    }

    pub fn to_sim(&self) -> Result<SimConfig, ConfigError> {
        let geometry = MemoryGeometry::new(self.geometry.fast, self.geometry.slow, self.geometry.page)
            .map_err(|e| ConfigError::invalid("geometry", e.to_string()))?;
        let sim = SimConfig {
            cores: self.system.cores,
            core_freq_ghz: self.system.core_freq_ghz,
            geometry,
            cache: self.cache,
            policy: self.policy,
            latencies: self.latencies,
            seed: self.system.seed,
            tlb_entries: self.system.tlb_entries,
            alloc: self.system.alloc,
            tcm: self.tcm,
            baseline: self.baseline,
            migration: self.migration,
        };
        sim.validate()?;
        if self.trace.file.is_some() == self.trace.spec.is_some() {
            return Err(ConfigError::invalid("trace", "give exactly one of `file` or `spec`"));
        }
        if let Some(spec) = &self.trace.spec {
            spec.validate()
                .map_err(|e| ConfigError::invalid("trace.spec", e.to_string()))?;
        }
        Ok(sim)
    }

    /// Short label for reports, e.g. `Epoch-DUON`.
    pub fn mode_label(&self) -> String {
        mode_label(self.policy.kind, self.policy.duon)
    }
}

pub fn mode_label(kind: PolicyKind, duon: bool) -> String {
    if duon && kind != PolicyKind::NoMigration {
        format!("{}-DUON", kind.name())
    } else {
        kind.name().to_string()
    }
}

fn path_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> ConfigError {
    let path = e.path().to_string();
    ConfigError::Invalid {
        field: if path == "." { "<root>".into() } else { path },
        reason: e.into_inner().to_string(),
    }
}

pub fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

/// Sets an existing key addressed by a dotted path.
pub fn set_path(root: &mut Value, key: &str, val: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(ConfigError::invalid(key, "not a configuration section"));
        };
        let last = i + 1 == parts.len();
        if last {
            if !map.contains_key(*part) {
                return Err(ConfigError::invalid(key, "unknown configuration key"));
            }
            map.insert(part.to_string(), val);
            return Ok(());
        }
        cur = map
            .get_mut(*part)
            .ok_or_else(|| ConfigError::invalid(key, "unknown configuration key"))?;
    }
    Err(ConfigError::BadOverride(key.to_string()))
}

/// Checks that `key` names an existing setting without changing anything.
pub fn check_key(cfg: &ExperimentConfig, key: &str) -> Result<(), ConfigError> {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    let mut cur = &mut v;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| ConfigError::invalid(key, "unknown configuration key"))?,
            _ => return Err(ConfigError::invalid(key, "unknown configuration key")),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_and_hbm_cycle_conversion() {
        let t = LatencyTable::for_devices(Device::Hbm, Device::Pcm, 3.2);
        assert_eq!((t.slow_read, t.slow_write), (256, 800));
        assert_eq!((t.fast_read, t.fast_write), (90, 90));
        let d = LatencyTable::for_devices(Device::Hbm, Device::Ddr4, 3.2);
        assert_eq!((d.slow_read, d.slow_write), (103, 103));
    }

    #[test]
    fn epoch_length_in_cycles() {
        let c = ExperimentConfig::preset("config1").unwrap().to_sim().unwrap();
        assert_eq!(c.epoch_cycles(), 32_000_000);
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4KiB").unwrap(), 4096);
        assert_eq!(parse_size("16GiB").unwrap(), 16 << 30);
        assert_eq!(parse_size("256MB").unwrap(), 256 << 20);
        assert_eq!(parse_size("0").unwrap(), 0);
        assert!(parse_size("3 parsecs").is_err());
    }

    #[test]
    fn presets_roundtrip_through_json() {
        for p in PRESETS {
            let c = ExperimentConfig::preset(p).unwrap();
            let back = ExperimentConfig::from_json_str(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
        let c2 = ExperimentConfig::preset("config2").unwrap();
        assert_eq!(c2.geometry.fast, 256 << 20);
        assert!(matches!(
            ExperimentConfig::preset("config9"),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn negative_latency_names_the_field() {
        let mut v = serde_json::to_value(ExperimentConfig::preset("config1").unwrap()).unwrap();
        v["latencies"]["fast_read"] = Value::from(-5);
        match ExperimentConfig::from_json_str(&v.to_string()) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "latencies.fast_read"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::preset("config1").unwrap()).unwrap();
        v["policy"]["thresh"] = Value::from(3);
        assert!(matches!(
            ExperimentConfig::from_json_str(&v.to_string()),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::preset("config1").unwrap();
        let o = c
            .with_overrides(&["policy.threshold=128", "policy.kind=Epoch", "policy.duon=false"])
            .unwrap();
        assert_eq!(o.policy.threshold, 128);
        assert_eq!(o.policy.kind, PolicyKind::Epoch);
        assert!(!o.policy.duon);
        assert!(c.with_overrides(&["policy.nope=1"]).is_err());
        assert!(c.with_overrides(&["policy.threshold"]).is_err());
        match c.with_overrides(&["latencies.fast_read=-1"]) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "latencies.fast_read"),
            other => panic!("{other:?}"),
        }
        assert!(check_key(&c, "policy.duon").is_ok());
        assert!(check_key(&c, "policy.bogus").is_err());
    }

    #[test]
    fn empty_geometry_is_invalid() {
        let mut c = ExperimentConfig::preset("config1").unwrap();
        c.geometry.fast = 0;
        c.geometry.slow = 0;
        assert!(c.to_sim().is_err());
    }
}
