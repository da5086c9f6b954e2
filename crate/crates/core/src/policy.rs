//! Hotness tracking and migration-candidate selection, plus the remap table
//! used by the reconciling (non-remap-aware) baseline.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::address_space::{PhysicalFrame, UnifiedPageId};
use crate::migration::Rw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    NoMigration,
    Threshold,
    Epoch,
    AdaptThold,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::NoMigration => "NoMigration",
            PolicyKind::Threshold => "Threshold",
            PolicyKind::Epoch => "Epoch",
            PolicyKind::AdaptThold => "AdaptThold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub threshold: u64,
    pub epoch_us: f64,
    pub duon: bool,
    pub adapt_period: u64,
    pub adapt_min: u64,
    pub adapt_max: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Threshold,
            threshold: 64,
            epoch_us: 10_000.0,
            duon: true,
            adapt_period: 4,
            adapt_min: 16,
            adapt_max: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationCandidate {
    pub ua: UnifiedPageId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counter {
    count: u64,
    last_access: u64,
}

/// Per-UA access counts and recency.
#[derive(Debug, Clone, Default)]
pub struct AccessCounters {
    map: FxHashMap<u64, Counter>,
}

impl AccessCounters {
    pub fn count(&self, ua: UnifiedPageId) -> u64 {
        self.map.get(&ua.0).map_or(0, |c| c.count)
    }

    pub fn last_access(&self, ua: UnifiedPageId) -> u64 {
        self.map.get(&ua.0).map_or(0, |c| c.last_access)
    }

    pub fn all_zero(&self) -> bool {
        self.map.values().all(|c| c.count == 0)
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    threshold: u64,
    pub counters: AccessCounters,
    prev_window_ipc: Option<f64>,
    pub adaptations: u64,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Self {
        Self {
            threshold: config.threshold,
            config,
            counters: AccessCounters::default(),
            prev_window_ipc: None,
            adaptations: 0,
        }
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    fn on_the_fly(&self) -> bool {
        matches!(self.config.kind, PolicyKind::Threshold | PolicyKind::AdaptThold)
    }

    /// Counts one memory access. On-the-fly policies return a candidate on
    /// exactly the access that brings a slow-tier page's count to the
    /// threshold.
    pub fn record_access(
        &mut self,
        ua: UnifiedPageId,
        _rw: Rw,
        now: u64,
        in_slow_tier: bool,
    ) -> Option<MigrationCandidate> {
        let fly = self.on_the_fly();
        let c = self.counters.map.entry(ua.0).or_default();
        c.count += 1;
        c.last_access = now;
        if fly && c.count == self.threshold && in_slow_tier {
            Some(MigrationCandidate { ua })
        } else {
            None
        }
    }

    /// Refreshes recency without counting (e.g. a page fault fill).
    pub fn touch(&mut self, ua: UnifiedPageId, now: u64) {
        self.counters.map.entry(ua.0).or_default().last_access = now;
    }

    /// Epoch policy: slow-tier pages at or above threshold, hottest first,
    /// ties to the lower UA. All epoch counts reset afterwards.
    pub fn epoch_boundary(&mut self, in_slow_tier: impl Fn(UnifiedPageId) -> bool) -> Vec<MigrationCandidate> {
        let mut out = Vec::new();
        if self.config.kind == PolicyKind::Epoch {
            let mut hot: Vec<(u64, u64)> = self
                .counters
                .map
                .iter()
                .filter(|(&ua, c)| c.count >= self.threshold && in_slow_tier(UnifiedPageId(ua)))
                .map(|(&ua, c)| (c.count, ua))
                .collect();
            hot.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            out = hot
                .into_iter()
                .map(|(_, ua)| MigrationCandidate { ua: UnifiedPageId(ua) })
                .collect();
            self.counters.map.values_mut().for_each(|c| c.count = 0);
        }
        out
    }

    /// Adaptive threshold: halve on an IPC gain above 0.5 %, double on a loss
    /// above 0.5 %, otherwise keep; clamped to the configured bounds.
    pub fn adapt(&mut self, window_ipc: f64) -> u64 {
        if let Some(prev) = self.prev_window_ipc.filter(|p| *p > 0.0) {
            let change = (window_ipc - prev) / prev;
            let next = if change > 0.005 {
                self.threshold / 2
            } else if change < -0.005 {
                self.threshold.saturating_mul(2)
            } else {
                self.threshold
            };
            let next = next.clamp(self.config.adapt_min, self.config.adapt_max);
            if next != self.threshold {
                self.adaptations += 1;
            }
            self.threshold = next;
        }
        self.prev_window_ipc = Some(window_ipc);
        self.threshold
    }

    /// Hotness restarts from zero after a page's migration retires.
    pub fn reset_page(&mut self, ua: UnifiedPageId) {
        if let Some(c) = self.counters.map.get_mut(&ua.0) {
            c.count = 0;
        }
    }

    pub fn forget(&mut self, ua: UnifiedPageId) {
        self.counters.map.remove(&ua.0);
    }

    /// Moves counters along with a relabeling of unified pages.
    pub fn relabel(&mut self, moves: &[(UnifiedPageId, UnifiedPageId)]) {
        let taken: Vec<(u64, Option<Counter>)> = moves
            .iter()
            .map(|(old, new)| (new.0, self.counters.map.remove(&old.0)))
            .collect();
        for (new, c) in taken {
            match c {
                Some(c) => {
                    self.counters.map.insert(new, c);
                }
                None => {
                    self.counters.map.remove(&new);
                }
            }
        }
    }
}

/// Migrated-but-unreconciled pages of the baseline scheme.
#[derive(Debug, Clone)]
pub struct RemapTable {
    capacity: usize,
    map: FxHashMap<u64, PhysicalFrame>,
    pub max_occupancy: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemapInsertion {
    pub ua: UnifiedPageId,
    pub ra: PhysicalFrame,
    pub occupancy: usize,
    pub reconcile_due: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReconcileReport {
    /// Initiating shootdown events, one per reconciled page.
    pub shootdown_events: u64,
    /// TLB entries invalidated across all cores.
    pub tlb_shootdowns: u64,
    pub lines_invalidated: u64,
    pub lines_written_back: u64,
    pub overhead_cycles: u64,
}

impl RemapTable {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            map: FxHashMap::default(),
            max_occupancy: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, ua: UnifiedPageId) -> Option<PhysicalFrame> {
        self.map.get(&ua.0).copied()
    }

    pub fn reconcile_due(&self) -> bool {
        !self.map.is_empty() && self.map.len() * 2 >= self.capacity
    }

    /// True when `extra` more entries would not fit.
    pub fn would_overflow(&self, extra: usize) -> bool {
        self.map.len() + extra > self.capacity
    }

    /// Records a page's new frame; a page back on its default frame leaves
    /// the table instead.
    pub fn record(&mut self, ua: UnifiedPageId, ra: PhysicalFrame, at_default: bool) -> RemapInsertion {
        if at_default {
            self.map.remove(&ua.0);
        } else {
            assert!(
                self.map.len() < self.capacity || self.map.contains_key(&ua.0),
                "remap table overflow"
            );
            self.map.insert(ua.0, ra);
        }
        self.max_occupancy = self.max_occupancy.max(self.map.len());
        RemapInsertion {
            ua,
            ra,
            occupancy: self.map.len(),
            reconcile_due: self.reconcile_due(),
        }
    }

    /// Entries in UA order.
    pub fn entries(&self) -> Vec<(UnifiedPageId, PhysicalFrame)> {
        let mut v: Vec<_> = self.map.iter().map(|(&u, &f)| (UnifiedPageId(u), f)).collect();
        v.sort();
        v
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }
}
