//! Times the six policy/mode combinations on the small stress machine used
//! by the oracle acceptance criterion: `EV=250000 cargo run --release --example stress -- SEED`.

use duon::address_space::MemoryGeometry;
use duon::cache::CacheConfig;
use duon::coherence::TcmConfig;
use duon::config::{AllocKind, BaselineConfig, LatencyTable, MigrationConfig, SimConfig};
use duon::engine::run_with;
use duon::policy::{PolicyConfig, PolicyKind};
use duon::workload::{generate, Pattern, TraceSpec};

fn main() {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().unwrap());
    let spec = TraceSpec {
        pattern: Pattern::HotSet {
            hot_pages: 48,
            hot_prob: 0.8,
        },
        footprint_pages: 320,
        events_per_core: std::env::var("EV").map_or(250_000, |s| s.parse().unwrap()),
        write_ratio: 0.4,
        mean_icount: 3.0,
        seed,
        page_size: 4096,
    };
    let t0 = std::time::Instant::now();
    let traces = generate(&spec, 4).unwrap();
    println!("gen {:.2}s", t0.elapsed().as_secs_f64());
    for kind in [PolicyKind::Threshold, PolicyKind::Epoch, PolicyKind::AdaptThold] {
        for duon in [true, false] {
            let cfg = SimConfig {
                cores: 4,
                core_freq_ghz: 3.2,
                geometry: MemoryGeometry::new(32 * 4096, 256 * 4096, 4096).unwrap(),
                cache: CacheConfig {
                    l1_size: 2048,
                    l1_assoc: 2,
                    l1_latency: 2,
                    llc_size: 16384,
                    llc_assoc: 4,
                    llc_latency: 21,
                    line_size: 64,
                },
                policy: PolicyConfig {
                    kind,
                    threshold: 4,
                    epoch_us: 20.0,
                    duon,
                    adapt_period: 2,
                    adapt_min: 2,
                    adapt_max: 64,
                },
                latencies: LatencyTable::default(),
                seed,
                tlb_entries: 32,
                alloc: AllocKind::Random,
                tcm: TcmConfig::default(),
                baseline: BaselineConfig {
                    remap_capacity: 16,
                    ..Default::default()
                },
                migration: MigrationConfig::default(),
            };
            let t = std::time::Instant::now();
            let o = run_with(&cfg, &traces, Default::default()).unwrap();
            let mut seen = std::collections::HashMap::new();
            let mut re = 0;
            for r in &o.records {
                for v in std::iter::once(r.hot_vpn).chain(r.victim_vpn) {
                    let n = seen.entry(v.0).or_insert(0);
                    if *n > 0 {
                        re += 1;
                    }
                    *n += 1;
                }
            }
            let s = o.stats;
            println!(
                "{:<16} {:.2}s mig {} remig {} faults {} rec {} reads {}",
                s.mode,
                t.elapsed().as_secs_f64(),
                s.migration_count,
                re,
                s.page_faults,
                s.reconciliations,
                s.reads_checked
            );
        }
    }
}
