use duon::address_space::MemoryGeometry;
use duon::cache::CacheConfig;
use duon::coherence::TcmConfig;
use duon::config::{AllocKind, BaselineConfig, LatencyTable, MigrationConfig, SimConfig};
use duon::engine::run;
use duon::policy::{PolicyConfig, PolicyKind};
use duon::workload::{generate, Pattern, TraceSpec};

fn small(kind: PolicyKind, duon: bool) -> SimConfig {
    SimConfig {
        cores: 4,
        core_freq_ghz: 3.2,
        geometry: MemoryGeometry::new(64 * 4096, 1024 * 4096, 4096).unwrap(),
        cache: CacheConfig {
            l1_size: 4096,
            l1_assoc: 4,
            l1_latency: 2,
            llc_size: 64 * 1024,
            llc_assoc: 8,
            llc_latency: 21,
            line_size: 64,
        },
        policy: PolicyConfig {
            kind,
            threshold: 8,
            epoch_us: 2.0,
            duon,
            adapt_period: 2,
            ..PolicyConfig::default()
        },
        latencies: LatencyTable::default(),
        seed: 7,
        tlb_entries: 64,
        alloc: AllocKind::Random,
        tcm: TcmConfig::default(),
        baseline: BaselineConfig {
            remap_capacity: 16,
            ..BaselineConfig::default()
        },
        migration: MigrationConfig::default(),
    }
}

fn spec(seed: u64) -> TraceSpec {
    TraceSpec {
        pattern: Pattern::Zipf { s: 1.0 },
        footprint_pages: 512,
        events_per_core: 20_000,
        write_ratio: 0.3,
        mean_icount: 4.0,
        seed,
        page_size: 4096,
    }
}

#[test]
fn every_mode_runs_clean() {
    let traces = generate(&spec(3), 4).unwrap();
    for kind in [
        PolicyKind::NoMigration,
        PolicyKind::Threshold,
        PolicyKind::Epoch,
        PolicyKind::AdaptThold,
    ] {
        for duon in [true, false] {
            let s = run(&small(kind, duon), &traces).unwrap();
            println!(
                "{:<18} ipc {:.4} mig {:>5} rec {:>3} sd {:>5} inv {:>6} faults {} coh {} stall {} drop {} cont {} mem {} ovh {}",
                s.mode, s.aggregate_ipc, s.migration_count, s.reconciliations, s.shootdown_events, s.lines_invalidated, s.page_faults, s.coherence_checks, s.migration_stall_cycles, s.dropped_candidates, s.contention_cycles, s.cores.iter().map(|c| c.memory_cycles).sum::<u64>(), s.cores.iter().map(|c| c.overhead_cycles).sum::<u64>()
            );
            if kind == PolicyKind::NoMigration {
                assert_eq!(s.migration_count, 0);
            }
        }
    }
}
