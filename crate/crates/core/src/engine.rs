//! Discrete-event driver. Cores are interleaved by their clocks (lowest
//! first, ties to the lower core id); every read is checked against a flat
//! reference memory and every event against the cycle ledger.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::config::{mode_label, SimConfig};
use crate::error::SimError;
use crate::machine::{Ledger, Machine};
use crate::migration::{JobRecord, Rw};
use crate::policy::PolicyKind;
use crate::rng::write_value;
use crate::workload::TraceEvent;

/// Reference memory with no tiers, no caches and no migration: the value
/// last written to each 8-byte word, zero if never written.
#[derive(Debug, Clone, Default)]
pub struct FlatOracle {
    words: FxHashMap<u64, u64>,
}

impl FlatOracle {
    pub fn read(&self, vaddr: u64) -> u64 {
        self.words.get(&(vaddr & !7)).copied().unwrap_or(0)
    }

    pub fn write(&mut self, vaddr: u64, value: u64) {
        self.words.insert(vaddr & !7, value);
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in address order.
    pub fn sorted(&self) -> Vec<(u64, u64)> {
        let mut v: Vec<(u64, u64)> = self.words.iter().map(|(&a, &v)| (a, v)).collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoreStats {
    pub core: usize,
    pub instructions: u64,
    pub cycles: u64,
    pub events: u64,
    pub ipc: f64,
    pub l1_hits: u64,
    pub llc_hits: u64,
    pub llc_misses: u64,
    pub issue_cycles: u64,
    pub cache_cycles: u64,
    pub memory_cycles: u64,
    pub stall_cycles: u64,
    pub overhead_cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub mode: String,
    pub cores: Vec<CoreStats>,
    pub aggregate_ipc: f64,
    pub total_instructions: u64,
    pub end_cycle: u64,
    pub llc_miss_rate: f64,
    pub page_faults: u64,
    pub migration_count: u64,
    pub pair_migrations: u64,
    pub migration_stall_cycles: u64,
    pub contention_cycles: u64,
    pub dropped_candidates: u64,
    pub discarded_candidates: u64,
    pub tcm_broadcasts: u64,
    pub tcm_entry_updates: u64,
    pub reconciliations: u64,
    pub shootdown_events: u64,
    pub tlb_shootdowns: u64,
    pub shootdown_cycles: u64,
    pub lines_invalidated: u64,
    pub invalidation_cycles: u64,
    pub reconcile_overhead_cycles: u64,
    pub remap_max_occupancy: u64,
    /// Reconciliation cycles charged in each epoch, epoch 0 first.
    pub overhead_cycles_per_epoch: Vec<u64>,
    pub final_threshold: u64,
    pub threshold_adaptations: u64,
    pub coherence_checks: u64,
    pub ledger_audits: u64,
    pub reads_checked: u64,
    pub words_verified: u64,
    /// A reconciliation was due when the trace ended and was not performed.
    pub reconcile_skipped_at_end: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep a line per fault, migration, retirement and reconciliation.
    pub trace_log: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub stats: SimStats,
    pub records: Vec<JobRecord>,
    pub log: Option<Vec<String>>,
}

/// Per-core IPC; a core that ran zero cycles has no IPC.
pub fn compute_ipc(instructions: u64, cycles: u64, core: usize) -> Result<f64, SimError> {
    if cycles == 0 {
        return Err(SimError::ZeroCycles(core));
    }
    Ok(instructions as f64 / cycles as f64)
}

pub fn run(cfg: &SimConfig, traces: &[Vec<TraceEvent>]) -> Result<SimStats, SimError> {
    run_with(cfg, traces, RunOptions::default()).map(|o| o.stats)
}

pub fn run_with(cfg: &SimConfig, traces: &[Vec<TraceEvent>], opts: RunOptions) -> Result<RunOutput, SimError> {
    if traces.len() > cfg.cores {
        return Err(SimError::CoreOutOfRange {
            core: traces.len() - 1,
            cores: cfg.cores,
        });
    }
    for (c, t) in traces.iter().enumerate() {
        if let Some(e) = t.iter().find(|e| e.core as usize != c) {
            return Err(SimError::CoreOutOfRange {
                core: e.core as usize,
                cores: cfg.cores,
            });
        }
    }

    let mut m = Machine::new(cfg)?;
    if opts.trace_log {
        m.log = Some(Vec::new());
    }
    let mut oracle = FlatOracle::default();
    let epoch = cfg.epoch_cycles();
    let mut next_epoch = epoch;
    let mut epochs_done = 0u64;
    let mut window_instr = 0u64;
    let mut reads_checked = 0u64;
    let mut audits = 0u64;
    let mut cursor = vec![0usize; traces.len()];

    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = (0..traces.len())
        .filter(|&c| !traces[c].is_empty())
        .map(|c| Reverse((0, c)))
        .collect();

    while let Some(Reverse((t, c))) = heap.pop() {
        // Reconciliation charges every core, so heap keys can go stale.
        let now = m.cores[c].clock;
        if now != t {
            heap.push(Reverse((now, c)));
            continue;
        }
        while t >= next_epoch {
            m.epoch_boundary(next_epoch)?;
            epochs_done += 1;
            if cfg.policy.kind == PolicyKind::AdaptThold && epochs_done.is_multiple_of(cfg.policy.adapt_period) {
                let total: u64 = m.cores.iter().map(|c| c.instructions).sum();
                let span = epoch * cfg.policy.adapt_period;
                m.policy.adapt((total - window_instr) as f64 / span as f64);
                window_instr = total;
            }
            next_epoch += epoch;
        }
        m.begin_event(t)?;
        if m.cores[c].clock != t {
            heap.push(Reverse((m.cores[c].clock, c)));
            continue;
        }

        let ev = &traces[c][cursor[c]];
        let idx = m.cores[c].events;
        let value = write_value(c, idx);
        let out = m.step_core(c, ev, value)?;
        match ev.rw {
            Rw::Write => oracle.write(ev.vaddr, value),
            Rw::Read => {
                let expected = oracle.read(ev.vaddr);
                reads_checked += 1;
                if out.value != expected {
                    return Err(SimError::Consistency {
                        event: idx,
                        core: c,
                        vpn: out.vpn.0,
                        vaddr: ev.vaddr,
                        expected,
                        got: out.value,
                    });
                }
            }
        }
        audit(&m, c)?;
        audits += 1;

        cursor[c] += 1;
        if cursor[c] < traces[c].len() {
            heap.push(Reverse((m.cores[c].clock, c)));
        }
    }

    // Drain: the active job retires, queued candidates are discarded, and a
    // reconciliation that is still pending has no later event to run at.
    let reconcile_skipped_at_end = m.reconcile_pending();
    let discarded = m.finish_migrations()?;
    let end_cycle = m.cores.iter().map(|c| c.clock).max().unwrap_or(0);
    m.flush_caches(end_cycle)?;
    let image = oracle.sorted();
    for &(vaddr, expected) in &image {
        let got = m.memory_word(vaddr);
        if got != expected {
            return Err(SimError::FinalImage { vaddr, expected, got });
        }
    }
    for c in 0..m.cores.len() {
        audit(&m, c)?;
        audits += 1;
    }

    let mut stats = collect(&m, cfg, end_cycle, epoch)?;
    stats.discarded_candidates = discarded as u64;
    stats.reconcile_skipped_at_end = reconcile_skipped_at_end;
    stats.ledger_audits = audits;
    stats.reads_checked = reads_checked;
    stats.words_verified = image.len() as u64;
    Ok(RunOutput {
        stats,
        records: m.controller.records.clone(),
        log: m.log.take(),
    })
}

fn audit(m: &Machine, c: usize) -> Result<(), SimError> {
    let core = &m.cores[c];
    if core.ledger.total() != core.clock {
        return Err(SimError::Invariant(format!(
            "core {c} ledger {:?} sums to {} but its clock is {}",
            core.ledger,
            core.ledger.total(),
            core.clock
        )));
    }
    Ok(())
}

fn collect(m: &Machine, cfg: &SimConfig, end_cycle: u64, epoch: u64) -> Result<SimStats, SimError> {
    let mut cores = Vec::with_capacity(m.cores.len());
    let mut misses = 0;
    let mut accesses = 0;
    for (c, st) in m.cores.iter().enumerate() {
        let cs = m.caches.stats[c];
        let Ledger {
            issue,
            cache,
            memory,
            stall,
            overhead,
        } = st.ledger;
        misses += cs.llc_misses;
        accesses += cs.l1_hits + cs.llc_hits + cs.llc_misses;
        cores.push(CoreStats {
            core: c,
            instructions: st.instructions,
            cycles: st.clock,
            events: st.events,
            ipc: if st.events == 0 {
                0.0
            } else {
                compute_ipc(st.instructions, st.clock, c)?
            },
            l1_hits: cs.l1_hits,
            llc_hits: cs.llc_hits,
            llc_misses: cs.llc_misses,
            issue_cycles: issue,
            cache_cycles: cache,
            memory_cycles: memory,
            stall_cycles: stall,
            overhead_cycles: overhead,
        });
    }
    let total_instructions = cores.iter().map(|c| c.instructions).sum();
    let total_cycles: u64 = cores.iter().filter(|c| c.events > 0).map(|c| c.cycles).sum();
    let mut per_epoch = m.epoch_overhead.clone();
    per_epoch.resize((end_cycle / epoch) as usize + 1, 0);
    let s = &m.stats;
    let coh = &m.tcm.stats;
    Ok(SimStats {
        mode: mode_label(cfg.policy.kind, cfg.policy.duon),
        aggregate_ipc: if total_cycles == 0 {
            0.0
        } else {
            total_instructions as f64 / total_cycles as f64
        },
        cores,
        total_instructions,
        end_cycle,
        llc_miss_rate: if accesses == 0 {
            0.0
        } else {
            misses as f64 / accesses as f64
        },
        page_faults: s.page_faults,
        migration_count: s.migrations_completed,
        pair_migrations: s.pair_migrations,
        migration_stall_cycles: s.migration_stall_cycles,
        contention_cycles: s.contention_cycles,
        dropped_candidates: m.controller.dropped_candidates,
        discarded_candidates: 0,
        tcm_broadcasts: if cfg.policy.duon { coh.broadcasts } else { 0 },
        tcm_entry_updates: if cfg.policy.duon { coh.entry_updates } else { 0 },
        reconciliations: s.reconciliations,
        shootdown_events: s.reconcile.shootdown_events,
        tlb_shootdowns: s.reconcile.tlb_shootdowns,
        shootdown_cycles: s.shootdown_cycles,
        lines_invalidated: s.reconcile.lines_invalidated,
        invalidation_cycles: s.invalidation_cycles,
        reconcile_overhead_cycles: s.reconcile.overhead_cycles,
        remap_max_occupancy: m.remap.as_ref().map_or(0, |r| r.max_occupancy as u64),
        overhead_cycles_per_epoch: per_epoch,
        final_threshold: m.policy.threshold(),
        threshold_adaptations: m.policy.adaptations,
        coherence_checks: s.coherence_checks,
        ledger_audits: 0,
        reads_checked: 0,
        words_verified: 0,
        reconcile_skipped_at_end: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cycles_has_no_ipc() {
        assert!(matches!(compute_ipc(5, 0, 3), Err(SimError::ZeroCycles(3))));
        assert_eq!(compute_ipc(10, 20, 0).unwrap(), 0.5);
    }

    #[test]
    fn oracle_defaults_to_zero_and_is_word_granular() {
        let mut o = FlatOracle::default();
        assert_eq!(o.read(0x1234), 0);
        o.write(0x1238, 9);
        assert_eq!(o.read(0x123F), 9);
        assert_eq!(o.read(0x1240), 0);
    }
}
