//! `duon` command-line driver: single runs, parameter sweeps, storage
//! overhead, trace generation, page-table dumps and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::Value;

use duon::address_space::{MemoryGeometry, OverheadReport};
use duon::config::{check_key, parse_size, parse_value, set_path, ExperimentConfig};
use duon::engine::{run_with, RunOptions, RunOutput, SimStats};
use duon::error::{ConfigError, SimError, TraceError};
use duon::machine::Machine;
use duon::stats::{
    epoch_rows, migration_rows, read_csv, stats_rows, write_csv, EpochRow, MigrationRow, StatsRow, SweepRow,
};
use duon::workload::{generate, interleave, read_trace, split_by_core, write_trace, Pattern, TraceEvent, TraceSpec};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(name = "duon", version, about = "Flat-address-space hybrid memory simulator")]
struct Cli {
    /// Preset name (config1, config2, config3) or path to a JSON config.
    #[arg(long, global = true, default_value = "config1")]
    config: String,
    /// KEY=VALUE config override, e.g. policy.threshold=128. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to the config's output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent runs for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Run seed; also replaces the seed of an inline trace spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write an event log (faults, migrations, reconciliations).
    #[arg(long, global = true)]
    trace_log: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation and write stats.csv, migrations.csv, epochs.csv and summary.md.
    Simulate(TraceArg),
    /// Run the cross product of axis values and write sweep.csv.
    Sweep(SweepArgs),
    /// Print the storage overhead of the page-table and TLB extensions.
    Overhead(OverheadArgs),
    /// Generate a synthetic trace file.
    GenTrace(GenTraceArgs),
    /// Run a simulation and print the final extended page table as CSV.
    DumpEpt(TraceArg),
    /// Re-read CSV files written by this tool and print them as markdown.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TraceArg {
    /// Trace file to use instead of the config's trace section.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Axis as KEY=V1,V2,... Repeatable; points are the cross product.
    #[arg(long = "axis", value_name = "KEY=V1,V2")]
    axes: Vec<String>,
    /// Add the standard comparison axes: policy.kind {Threshold, Epoch} x
    /// policy.duon {false, true} x policy.threshold {64, 128}.
    #[arg(long)]
    preset_axes: bool,
    /// Points with this KEY=VALUE are the reference for normalized IPC.
    #[arg(long, default_value = "policy.duon=false")]
    baseline: String,
    #[command(flatten)]
    trace: TraceArg,
}

#[derive(Args, Debug)]
struct OverheadArgs {
    #[arg(long, default_value = "1GiB")]
    fast: String,
    #[arg(long, default_value = "16GiB")]
    slow: String,
    #[arg(long, default_value = "4KiB")]
    page: String,
    #[arg(long, default_value_t = 4096)]
    tlb_entries: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PatternArg {
    Uniform,
    Zipf,
    Hotset,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    /// Output trace file.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "zipf")]
    pattern: PatternArg,
    /// Zipf exponent.
    #[arg(long, default_value_t = 1.0)]
    zipf_s: f64,
    #[arg(long, default_value_t = 64)]
    hot_pages: u64,
    #[arg(long, default_value_t = 0.9)]
    hot_prob: f64,
    /// Distinct pages touched.
    #[arg(long, default_value_t = 8192)]
    footprint: u64,
    #[arg(long, default_value_t = 16)]
    cores: usize,
    /// Events per core.
    #[arg(long, default_value_t = 100_000)]
    events: u64,
    #[arg(long, default_value_t = 0.3)]
    write_ratio: f64,
    #[arg(long, default_value_t = 4.0)]
    mean_icount: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// CSV files (stats, migrations, epochs or sweep).
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Simulate(t) => cmd_simulate(cli, t),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Overhead(a) => cmd_overhead(a),
        Command::GenTrace(a) => cmd_gen_trace(cli, a),
        Command::DumpEpt(t) => cmd_dump_ept(cli, t),
        Command::Report(a) => cmd_report(a),
    }
}

/// Loads the config, applies overrides, the seed and a trace file.
fn load_config(cli: &Cli, trace: &TraceArg) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.system.seed = seed;
        if let Some(spec) = cfg.trace.spec.as_mut() {
            spec.seed = seed;
        }
    }
    if let Some(path) = &trace.trace {
        cfg.trace.file = Some(path.clone());
        cfg.trace.spec = None;
    } else if let Some(file) = cfg.trace.file.take() {
        // Relative trace paths in a config file are relative to that file.
        let base = Path::new(&cli.config)
            .parent()
            .filter(|_| Path::new(&cli.config).is_file());
        cfg.trace.file = Some(match base {
            Some(dir) if file.is_relative() => dir.join(file),
            _ => file,
        });
    }
    cfg.to_sim()?;
    Ok(cfg)
}

fn load_traces(cfg: &ExperimentConfig) -> Result<Vec<Vec<TraceEvent>>> {
    let cores = cfg.system.cores;
    match (&cfg.trace.file, &cfg.trace.spec) {
        (Some(path), _) => Ok(split_by_core(&read_trace(path)?, cores)?),
        (None, Some(spec)) => Ok(generate(spec, cores)?),
        (None, None) => Err(ConfigError::invalid("trace", "give exactly one of `file` or `spec`").into()),
    }
}

fn run_config(cfg: &ExperimentConfig, trace_log: bool) -> Result<RunOutput> {
    let sim = cfg.to_sim()?;
    let traces = load_traces(cfg)?;
    Ok(run_with(&sim, &traces, RunOptions { trace_log })?)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    write_csv(rows, f).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_simulate(cli: &Cli, t: &TraceArg) -> Result<()> {
    let cfg = load_config(cli, t)?;
    let dir = out_dir(cli, &cfg)?;
    let out = run_config(&cfg, cli.trace_log)?;
    write_rows(&dir.join("stats.csv"), &stats_rows(&out.stats))?;
    write_rows(&dir.join("migrations.csv"), &migration_rows(&out.records))?;
    write_rows(&dir.join("epochs.csv"), &epoch_rows(&out.stats))?;
    let summary = dir.join("summary.md");
    fs::write(&summary, summary_md(&cfg, &out.stats)).map_err(io_err(&summary))?;
    if let Some(log) = &out.log {
        let p = dir.join("events.log");
        let mut text = log.join("\n");
        text.push('\n');
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    println!("aggregate_ipc {:.6}", out.stats.aggregate_ipc);
    Ok(())
}

fn summary_md(cfg: &ExperimentConfig, s: &SimStats) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "# Run summary\n");
    let _ = writeln!(m, "- mode: {}", s.mode);
    let _ = writeln!(m, "- threshold: {} (final {})", cfg.policy.threshold, s.final_threshold);
    let _ = writeln!(m, "- epoch_us: {}", cfg.policy.epoch_us);
    let _ = writeln!(
        m,
        "- geometry: {} B fast, {} B slow, {} B pages",
        cfg.geometry.fast, cfg.geometry.slow, cfg.geometry.page
    );
    let _ = writeln!(m, "- cores: {}, seed: {}", cfg.system.cores, cfg.system.seed);
    let _ = writeln!(m, "- aggregate IPC: {:.6}", s.aggregate_ipc);
    let _ = writeln!(
        m,
        "- instructions: {}, end cycle: {}",
        s.total_instructions, s.end_cycle
    );
    let _ = writeln!(m, "- LLC miss rate: {:.4}", s.llc_miss_rate);
    let _ = writeln!(m, "- page faults: {}", s.page_faults);
    let _ = writeln!(
        m,
        "- migrations: {} ({} pair swaps), stall cycles {}",
        s.migration_count, s.pair_migrations, s.migration_stall_cycles
    );
    let _ = writeln!(
        m,
        "- candidates dropped (queue full): {}, discarded at end: {}",
        s.dropped_candidates, s.discarded_candidates
    );
    let _ = writeln!(
        m,
        "- TLB coherence broadcasts: {} ({} entry updates)",
        s.tcm_broadcasts, s.tcm_entry_updates
    );
    let _ = writeln!(
        m,
        "- reconciliations: {}, shootdowns: {} ({} cycles), lines invalidated: {} ({} cycles)",
        s.reconciliations, s.shootdown_events, s.shootdown_cycles, s.lines_invalidated, s.invalidation_cycles
    );
    if s.reconcile_skipped_at_end {
        let _ = writeln!(m, "- a reconciliation was pending when the trace ended and was not run");
    }
    let _ = writeln!(
        m,
        "- checks: {} reads, {} final words, {} ledger audits, {} coherence checks",
        s.reads_checked, s.words_verified, s.ledger_audits, s.coherence_checks
    );
    let _ = writeln!(
        m,
        "\n| core | instructions | cycles | IPC | LLC misses |\n|---|---|---|---|---|"
    );
    for c in &s.cores {
        let _ = writeln!(
            m,
            "| {} | {} | {} | {:.6} | {} |",
            c.core, c.instructions, c.cycles, c.ipc, c.llc_misses
        );
    }
    m
}

// ---------------------------------------------------------------------------
// sweep

struct Axis {
    key: String,
    values: Vec<Value>,
}

fn parse_axis(s: &str) -> Result<Axis> {
    let (key, vals) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis `{s}` is not KEY=V1,V2,...")))?;
    let values: Vec<Value> = vals.split(',').map(|v| parse_value(v.trim())).collect();
    if values.is_empty() || vals.trim().is_empty() {
        return Err(CliError::Usage(format!("axis `{key}` has no values")));
    }
    Ok(Axis {
        key: key.trim().to_string(),
        values,
    })
}

fn preset_axes() -> Vec<Axis> {
    vec![
        Axis {
            key: "policy.kind".into(),
            values: vec!["Threshold".into(), "Epoch".into()],
        },
        Axis {
            key: "policy.duon".into(),
            values: vec![false.into(), true.into()],
        },
        Axis {
            key: "policy.threshold".into(),
            values: vec![64.into(), 128.into()],
        },
    ]
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cross product in axis order, the last axis varying fastest.
fn cross_product(axes: &[Axis]) -> Vec<Vec<Value>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let base = load_config(cli, &a.trace)?;
    let mut axes = if a.preset_axes { preset_axes() } else { Vec::new() };
    for s in &a.axes {
        axes.push(parse_axis(s)?);
    }
    if axes.is_empty() {
        return Err(CliError::Usage("give at least one --axis or --preset-axes".into()));
    }
    let (bkey, bval) = a
        .baseline
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("baseline `{}` is not KEY=VALUE", a.baseline)))?;
    let bval = parse_value(bval.trim());
    let bkey = bkey.trim();
    let bidx = axes
        .iter()
        .position(|x| x.key == bkey)
        .ok_or_else(|| CliError::Usage(format!("baseline key `{bkey}` is not a sweep axis")))?;

    // Validate every point before running any.
    let base_json = serde_json::to_value(&base).expect("config serializes");
    for axis in &axes {
        check_key(&base, &axis.key)?;
    }
    let points = cross_product(&axes);
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut v = base_json.clone();
        for (axis, val) in axes.iter().zip(p) {
            set_path(&mut v, &axis.key, val.clone())?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.to_sim()?;
        configs.push(cfg);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<SimStats>> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| run_config(c, false).map(|o| o.stats))
            .collect()
    });
    let stats = results.into_iter().collect::<Result<Vec<_>>>()?;

    // A point's reference is the point with the same other coordinates and
    // the baseline value on the baseline axis.
    let find_ref = |p: &Vec<Value>| {
        points
            .iter()
            .position(|q| q[bidx] == bval && q.iter().zip(p).enumerate().all(|(i, (x, y))| i == bidx || x == y))
    };
    let mut rows = Vec::with_capacity(points.len());
    for (i, (p, s)) in points.iter().zip(&stats).enumerate() {
        let reference = find_ref(p).map(|r| stats[r].aggregate_ipc);
        let normalized = match reference {
            Some(r) if r > 0.0 => s.aggregate_ipc / r,
            _ => f64::NAN,
        };
        rows.push(SweepRow {
            point: i,
            mode: s.mode.clone(),
            params: axes
                .iter()
                .zip(p)
                .map(|(a, v)| format!("{}={}", a.key, value_text(v)))
                .collect::<Vec<_>>()
                .join(";"),
            aggregate_ipc: s.aggregate_ipc,
            normalized_ipc: normalized,
            migration_count: s.migration_count,
            shootdown_events: s.shootdown_events,
            lines_invalidated: s.lines_invalidated,
            reconcile_overhead_cycles: s.reconcile_overhead_cycles,
        });
    }
    let dir = out_dir(cli, &base)?;
    write_rows(&dir.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!(
            "{} {} ipc {:.6} normalized {:.4}",
            r.point, r.params, r.aggregate_ipc, r.normalized_ipc
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// overhead, gen-trace, dump-ept

fn cmd_overhead(a: &OverheadArgs) -> Result<()> {
    let size = |name: &str, s: &str| parse_size(s).map_err(|e| CliError::Usage(format!("--{name}: {e}")));
    let geom = MemoryGeometry::new(size("fast", &a.fast)?, size("slow", &a.slow)?, size("page", &a.page)?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    geom.require_nonempty().map_err(|e| CliError::Usage(e.to_string()))?;
    let r = OverheadReport::compute(&geom, a.tlb_entries);
    println!("{}", OverheadReport::CSV_HEADER);
    println!("{}", r.csv_row());
    eprintln!(
        "ept: {:.4} MiB ({:.4}% of memory); tlb: {:.2} KiB ({:.2}% of a conventional TLB, {:.2}% of the extended TLB)",
        r.ept_extension_bytes as f64 / (1 << 20) as f64,
        r.ept_fraction_of_memory * 100.0,
        r.tlb_extension_bytes as f64 / 1024.0,
        r.tlb_ratio_vs_conventional * 100.0,
        r.tlb_ratio_vs_extended * 100.0
    );
    Ok(())
}

fn cmd_gen_trace(cli: &Cli, a: &GenTraceArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or_else(|| {
        eprintln!("note: --seed not given, using seed 0");
        0
    });
    let pattern = match a.pattern {
        PatternArg::Uniform => Pattern::Uniform,
        PatternArg::Zipf => Pattern::Zipf { s: a.zipf_s },
        PatternArg::Hotset => Pattern::HotSet {
            hot_pages: a.hot_pages,
            hot_prob: a.hot_prob,
        },
    };
    let spec = TraceSpec {
        pattern,
        footprint_pages: a.footprint,
        events_per_core: a.events,
        write_ratio: a.write_ratio,
        mean_icount: a.mean_icount,
        seed,
        page_size: 4096,
    };
    let per_core = generate(&spec, a.cores)?;
    if let Some(dir) = a.path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_trace(&interleave(&per_core), &a.path)?;
    Ok(())
}

fn cmd_dump_ept(cli: &Cli, t: &TraceArg) -> Result<()> {
    let cfg = load_config(cli, t)?;
    let sim = cfg.to_sim()?;
    let traces = load_traces(&cfg)?;
    let m = run_machine(&sim, &traces)?;
    let mut out = String::from("vpn,ua,ra,migrated,ongoing,pair,residency\n");
    for e in m.ept.sorted() {
        let _ = writeln!(
            out,
            "{:#x},{},{},{},{},{},{}",
            e.vpn.0,
            e.ua.0,
            e.ra.map_or_else(|| "-".to_string(), |f| f.to_string()),
            u8::from(e.migrated),
            u8::from(e.ongoing_migration),
            u8::from(e.pair),
            u8::from(e.buffer_residency)
        );
    }
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("ept.csv");
            fs::write(&p, out).map_err(io_err(&p))?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

/// Runs the traces on a machine and returns it for inspection.
fn run_machine(sim: &duon::config::SimConfig, traces: &[Vec<TraceEvent>]) -> Result<Machine> {
    let mut m = Machine::new(sim)?;
    let mut cursor = vec![0usize; traces.len()];
    loop {
        let next = (0..traces.len())
            .filter(|&c| cursor[c] < traces[c].len())
            .min_by_key(|&c| (m.cores[c].clock, c));
        let Some(c) = next else { break };
        let t = m.cores[c].clock;
        m.begin_event(t)?;
        let idx = m.cores[c].events;
        m.step_core(c, &traces[c][cursor[c]], duon::rng::write_value(c, idx))?;
        cursor[c] += 1;
    }
    m.finish_migrations()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// report

fn cmd_report(a: &ReportArgs) -> Result<()> {
    for path in &a.files {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let header = text.lines().next().unwrap_or_default();
        let csv_err = |source| CliError::Csv {
            path: path.clone(),
            source,
        };
        println!("## {}\n", path.display());
        if header.starts_with("scope,") {
            let rows: Vec<StatsRow> = read_csv(text.as_bytes()).map_err(csv_err)?;
            println!(
                "| scope | core | instructions | cycles | IPC | LLC misses | overhead |\n|---|---|---|---|---|---|---|"
            );
            for r in rows {
                println!(
                    "| {} | {} | {} | {} | {:.6} | {} | {} |",
                    r.scope,
                    r.core.map_or_else(String::new, |c| c.to_string()),
                    r.instructions,
                    r.cycles,
                    r.ipc,
                    r.llc_misses,
                    r.overhead_cycles
                );
            }
        } else if header.starts_with("job,") {
            let rows: Vec<MigrationRow> = read_csv(text.as_bytes()).map_err(csv_err)?;
            let pairs = rows.iter().filter(|r| r.pair).count();
            let span: u64 = rows.iter().map(|r| r.end_cycle - r.start_cycle).sum();
            println!(
                "{} migrations ({} pair swaps), mean duration {:.1} cycles",
                rows.len(),
                pairs,
                span as f64 / rows.len().max(1) as f64
            );
        } else if header.starts_with("epoch,") {
            let rows: Vec<EpochRow> = read_csv(text.as_bytes()).map_err(csv_err)?;
            println!("| epoch | overhead | accumulated |\n|---|---|---|");
            for r in rows {
                println!("| {} | {} | {} |", r.epoch, r.overhead_cycles, r.accumulated_cycles);
            }
        } else if header.starts_with("point,") {
            let rows: Vec<SweepRow> = read_csv(text.as_bytes()).map_err(csv_err)?;
            println!("| point | mode | params | IPC | normalized |\n|---|---|---|---|---|");
            for r in rows {
                println!(
                    "| {} | {} | {} | {:.6} | {:.4} |",
                    r.point, r.mode, r.params, r.aggregate_ipc, r.normalized_ipc
                );
            }
        } else {
            return Err(CliError::Usage(format!(
                "{}: not a stats, migrations, epochs or sweep CSV",
                path.display()
            )));
        }
        println!();
    }
    Ok(())
}
