//! CSV forms of run results. Column orders are fixed; each writer has a
//! matching reader so every file the tool emits can be parsed back.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::SimStats;
use crate::migration::JobRecord;

/// One row of `stats.csv`: a row per core (`scope = core`) followed by one
/// aggregate row (`scope = all`, `core` empty). Run-wide counters are only
/// filled on the aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub scope: String,
    pub core: Option<usize>,
    pub instructions: u64,
    pub cycles: u64,
    pub ipc: f64,
    pub l1_hits: u64,
    pub llc_hits: u64,
    pub llc_misses: u64,
    pub stall_cycles: u64,
    pub issue_cycles: u64,
    pub cache_cycles: u64,
    pub memory_cycles: u64,
    pub overhead_cycles: u64,
    pub migration_count: Option<u64>,
    pub migration_stall_cycles: Option<u64>,
    pub shootdown_events: Option<u64>,
    pub shootdown_cycles: Option<u64>,
    pub lines_invalidated: Option<u64>,
    pub invalidation_cycles: Option<u64>,
    pub tcm_broadcasts: Option<u64>,
    pub page_faults: Option<u64>,
    pub reconciliations: Option<u64>,
}

pub const STATS_COLUMNS: [&str; 22] = [
    "scope",
    "core",
    "instructions",
    "cycles",
    "ipc",
    "l1_hits",
    "llc_hits",
    "llc_misses",
    "stall_cycles",
    "issue_cycles",
    "cache_cycles",
    "memory_cycles",
    "overhead_cycles",
    "migration_count",
    "migration_stall_cycles",
    "shootdown_events",
    "shootdown_cycles",
    "lines_invalidated",
    "invalidation_cycles",
    "tcm_broadcasts",
    "page_faults",
    "reconciliations",
];

pub fn stats_rows(s: &SimStats) -> Vec<StatsRow> {
    let mut rows: Vec<StatsRow> = s
        .cores
        .iter()
        .map(|c| StatsRow {
            scope: "core".into(),
            core: Some(c.core),
            instructions: c.instructions,
            cycles: c.cycles,
            ipc: c.ipc,
            l1_hits: c.l1_hits,
            llc_hits: c.llc_hits,
            llc_misses: c.llc_misses,
            stall_cycles: c.stall_cycles,
            issue_cycles: c.issue_cycles,
            cache_cycles: c.cache_cycles,
            memory_cycles: c.memory_cycles,
            overhead_cycles: c.overhead_cycles,
            migration_count: None,
            migration_stall_cycles: None,
            shootdown_events: None,
            shootdown_cycles: None,
            lines_invalidated: None,
            invalidation_cycles: None,
            tcm_broadcasts: None,
            page_faults: None,
            reconciliations: None,
        })
        .collect();
    let sum = |f: fn(&StatsRow) -> u64| rows.iter().map(f).sum::<u64>();
    let all = StatsRow {
        scope: "all".into(),
        core: None,
        instructions: sum(|r| r.instructions),
        cycles: sum(|r| r.cycles),
        ipc: s.aggregate_ipc,
        l1_hits: sum(|r| r.l1_hits),
        llc_hits: sum(|r| r.llc_hits),
        llc_misses: sum(|r| r.llc_misses),
        stall_cycles: sum(|r| r.stall_cycles),
        issue_cycles: sum(|r| r.issue_cycles),
        cache_cycles: sum(|r| r.cache_cycles),
        memory_cycles: sum(|r| r.memory_cycles),
        overhead_cycles: sum(|r| r.overhead_cycles),
        migration_count: Some(s.migration_count),
        migration_stall_cycles: Some(s.migration_stall_cycles),
        shootdown_events: Some(s.shootdown_events),
        shootdown_cycles: Some(s.shootdown_cycles),
        lines_invalidated: Some(s.lines_invalidated),
        invalidation_cycles: Some(s.invalidation_cycles),
        tcm_broadcasts: Some(s.tcm_broadcasts),
        page_faults: Some(s.page_faults),
        reconciliations: Some(s.reconciliations),
    };
    rows.push(all);
    rows
}

/// One retired migration job, in retirement order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationRow {
    pub job: u64,
    pub hot_vpn: u64,
    pub victim_vpn: Option<u64>,
    pub pair: bool,
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub stalled_requests: u64,
    pub buffer_served: u64,
    pub redirected: u64,
}

pub fn migration_rows(records: &[JobRecord]) -> Vec<MigrationRow> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| MigrationRow {
            job: i as u64,
            hot_vpn: r.hot_vpn.0,
            victim_vpn: r.victim_vpn.map(|v| v.0),
            pair: r.pair,
            start_cycle: r.start_cycle,
            end_cycle: r.end_cycle,
            stalled_requests: r.stalled_requests,
            buffer_served: r.buffer_served,
            redirected: r.redirected,
        })
        .collect()
}

/// Reconciliation cycles charged in one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub overhead_cycles: u64,
    pub accumulated_cycles: u64,
}

pub fn epoch_rows(s: &SimStats) -> Vec<EpochRow> {
    let mut acc = 0;
    s.overhead_cycles_per_epoch
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            acc += c;
            EpochRow {
                epoch: i as u64,
                overhead_cycles: c,
                accumulated_cycles: acc,
            }
        })
        .collect()
}

/// One point of a sweep. `params` lists the point's axis values as
/// `key=value` pairs joined by `;`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub mode: String,
    pub params: String,
    pub aggregate_ipc: f64,
    pub normalized_ipc: f64,
    pub migration_count: u64,
    pub shootdown_events: u64,
    pub lines_invalidated: u64,
    pub reconcile_overhead_cycles: u64,
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::CoreStats;

    fn stats() -> SimStats {
        SimStats {
            cores: vec![
                CoreStats {
                    core: 0,
                    instructions: 10,
                    cycles: 40,
                    ipc: 0.25,
                    issue_cycles: 10,
                    cache_cycles: 30,
                    ..Default::default()
                },
                CoreStats {
                    core: 1,
                    instructions: 6,
                    cycles: 12,
                    ipc: 0.5,
                    issue_cycles: 6,
                    memory_cycles: 6,
                    ..Default::default()
                },
            ],
            aggregate_ipc: 16.0 / 52.0,
            overhead_cycles_per_epoch: vec![0, 5, 0],
            ..Default::default()
        }
    }

    #[test]
    fn stats_csv_has_frozen_header_and_round_trips() {
        let rows = stats_rows(&stats());
        let text = to_csv_string(&rows);
        assert_eq!(text.lines().next().unwrap(), STATS_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);
        let back: Vec<StatsRow> = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[2].instructions, 16);
        assert_eq!(back[2].cycles, 52);
    }

    #[test]
    fn epoch_rows_accumulate() {
        let rows = epoch_rows(&stats());
        assert_eq!(
            rows.iter().map(|r| r.accumulated_cycles).collect::<Vec<_>>(),
            vec![0, 5, 5]
        );
    }
}
