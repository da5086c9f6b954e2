use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_duon");

/// Keeps config1 but shrinks the run so each invocation takes well under a second.
const SMALL: [&str; 6] = [
    "--override",
    "trace.spec.events_per_core=500",
    "--override",
    "geometry.fast=\"8MiB\"",
    "--override",
    "geometry.slow=\"64MiB\"",
];

fn duon(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small(args: &[&str]) -> Vec<String> {
    SMALL.iter().chain(args).map(|s| s.to_string()).collect()
}

fn run_small(args: &[&str]) -> Output {
    let a = small(args);
    duon(&a.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn simulate_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = run_small(&[
        "--override",
        "policy.threshold=128",
        "--out",
        dir,
        "--trace-log",
        "simulate",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("aggregate_ipc "));
    for f in ["stats.csv", "migrations.csv", "epochs.csv", "summary.md", "events.log"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let summary = fs::read_to_string(tmp.path().join("summary.md")).unwrap();
    assert!(summary.contains("- threshold: 128"), "{summary}");
    let stats = fs::read_to_string(tmp.path().join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 16 + 2);
    assert!(stats.starts_with("scope,core,instructions,cycles,ipc,"));
}

#[test]
fn simulate_runs_a_generated_trace_file() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.trace");
    let t = trace.to_str().unwrap();
    let g = duon(&[
        "--seed",
        "9",
        "gen-trace",
        t,
        "--cores",
        "4",
        "--events",
        "300",
        "--footprint",
        "64",
    ]);
    assert!(g.status.success(), "{}", stderr(&g));
    let out = tmp.path().join("out");
    let o = run_small(&[
        "--override",
        "system.cores=4",
        "--out",
        out.to_str().unwrap(),
        "simulate",
        "--trace",
        t,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
    let all = stats.lines().last().unwrap();
    assert!(all.starts_with("all,"), "{all}");
}

#[test]
fn gen_trace_is_deterministic_and_notes_a_missing_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    let args = |path: &str| {
        vec![
            "gen-trace".to_string(),
            path.to_string(),
            "--cores".into(),
            "2".into(),
            "--events".into(),
            "100".into(),
            "--pattern".into(),
            "hotset".into(),
        ]
    };
    let a = duon(&args(&p("a")).iter().map(String::as_str).collect::<Vec<_>>());
    let b = duon(&args(&p("b")).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(a.status.success() && b.status.success());
    assert!(stderr(&a).contains("--seed not given"));
    let ta = fs::read_to_string(p("a")).unwrap();
    assert_eq!(ta, fs::read_to_string(p("b")).unwrap());
    let events = ta
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count();
    assert_eq!(events, 200);

    let c = duon(&[
        "--seed",
        "1",
        "gen-trace",
        &p("c"),
        "--cores",
        "2",
        "--events",
        "100",
        "--pattern",
        "hotset",
    ]);
    assert!(c.status.success());
    assert!(!stderr(&c).contains("--seed not given"));
    assert_ne!(ta, fs::read_to_string(p("c")).unwrap());
}

#[test]
fn sweep_normalizes_to_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = run_small(&[
        "--jobs",
        "2",
        "--out",
        dir,
        "sweep",
        "--axis",
        "policy.duon=false,true",
        "--axis",
        "policy.threshold=4,128",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows[..2] {
        assert!(r[2].starts_with("policy.duon=false"));
        assert_eq!(r[4].parse::<f64>().unwrap(), 1.0);
    }
    assert!(rows[2][1].ends_with("-DUON"));
}

#[test]
fn preset_sweep_has_eight_points() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = run_small(&[
        "--override",
        "trace.spec.events_per_core=100",
        "--jobs",
        "4",
        "--out",
        dir,
        "sweep",
        "--preset-axes",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn sweep_rejects_bad_axes_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = run_small(&[
        "--out",
        dir,
        "sweep",
        "--axis",
        "policy.duon=false,true",
        "--axis",
        "policy.nonsense=1,2",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("policy.nonsense"), "{}", stderr(&o));
    assert!(!Path::new(dir).join("sweep.csv").exists());

    let o = run_small(&["--out", dir, "sweep", "--axis", "policy.threshold=8,-3"]);
    assert!(!o.status.success());
    assert!(!Path::new(dir).join("sweep.csv").exists());

    let o = run_small(&["sweep", "--axis", "policy.threshold=8,16"]);
    assert!(!o.status.success(), "baseline key must be an axis");
}

#[test]
fn bad_overrides_name_the_key() {
    let o = run_small(&["--override", "latencies.fast_read=-1", "simulate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("latencies.fast_read"), "{}", stderr(&o));
    let o = run_small(&["--override", "policy.thresold=3", "simulate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("policy.thresold"));
}

#[test]
fn overhead_prints_a_csv_row_and_rejects_empty_geometry() {
    let o = duon(&["overhead", "--fast", "256MiB"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ept_bytes,tlb_bytes,fraction"));
    assert!(lines.next().unwrap().starts_with("13795328,12800,"));

    let o = duon(&["overhead", "--fast", "0", "--slow", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn dump_ept_lists_mapped_pages() {
    let o = run_small(&["--override", "trace.spec.events_per_core=200", "dump-ept"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("vpn,ua,ra,migrated,ongoing,pair,residency"));
    assert!(text.lines().count() > 1);
    // Nothing is mid-migration once the run has drained.
    for l in text.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 7, "{l}");
        assert_eq!(f[4], "0", "{l}");
        assert_eq!(f[3] == "1", f[2] != "-", "{l}");
    }
}

#[test]
fn report_reads_back_every_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    assert!(run_small(&["--out", dir, "simulate"]).status.success());
    assert!(run_small(&["--out", dir, "sweep", "--axis", "policy.duon=false,true"])
        .status
        .success());
    let files: Vec<String> = ["stats.csv", "migrations.csv", "epochs.csv", "sweep.csv"]
        .iter()
        .map(|f| tmp.path().join(f).to_str().unwrap().to_string())
        .collect();
    let mut args = vec!["report"];
    args.extend(files.iter().map(String::as_str));
    let o = duon(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("| scope | core |"));
    assert!(text.contains("| point | mode |"));
    assert!(text.contains("migrations ("));

    let bogus = tmp.path().join("summary.md");
    let o = duon(&["report", bogus.to_str().unwrap()]);
    assert!(!o.status.success());
}
