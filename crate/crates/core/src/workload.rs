//! Synthetic trace generation and the text trace format.
//!
//! A trace file is a header line `#duon-trace v1` followed by one event per
//! line, `core,op,vaddr_hex,icount`, e.g. `0,R,0x1F400,12`. Lines end with a
//! single line feed and fields carry no spaces.
//!
//! Generation is a pure function of the spec. Page popularity ranks are
//! drawn from the named distribution and mapped to pages through a seeded
//! Fisher–Yates permutation, so hot pages are scattered across the
//! footprint. Core `c` draws from `SplitMix64::new(mix64(seed + (c + 1) *
//! GAMMA))`; per event it draws, in order: the page rank, the line offset,
//! the word offset, the read/write choice and the instruction gap.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::migration::Rw;
use crate::rng::{mix64, SplitMix64, GAMMA};

pub const TRACE_HEADER: &str = "#duon-trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub core: u32,
    pub rw: Rw,
    pub vaddr: u64,
    /// Instructions since this core's previous memory event.
    pub icount: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Pattern {
    Uniform,
    Zipf {
        s: f64,
    },
    HotSet {
        hot_pages: u64,
        hot_prob: f64,
    },
    /// Phases run in order, each for `events` events per core, and repeat
    /// until the trace is long enough. Each phase gets its own page
    /// permutation, so the hot set moves at every phase change.
    Phased {
        phases: Vec<Phase>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub pattern: Pattern,
    pub events: u64,
}

fn default_page_size() -> u64 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub pattern: Pattern,
    pub footprint_pages: u64,
    pub events_per_core: u64,
    pub write_ratio: f64,
    pub mean_icount: f64,
    pub seed: u64,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Zipf { s: 1.0 },
            footprint_pages: 1024,
            events_per_core: 10_000,
            write_ratio: 0.3,
            mean_icount: 4.0,
            seed: 0,
            page_size: default_page_size(),
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), TraceError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(TraceError::Spec(format!("{name} must be in [0, 1], got {p}")))
    }
}

impl Pattern {
    fn validate(&self, footprint: u64) -> Result<(), TraceError> {
        match self {
            Pattern::Uniform => Ok(()),
            Pattern::Zipf { s } => {
                if *s > 0.0 && s.is_finite() {
                    Ok(())
                } else {
                    Err(TraceError::Spec(format!("zipf exponent must be positive, got {s}")))
                }
            }
            Pattern::HotSet { hot_pages, hot_prob } => {
                check_prob("hot_prob", *hot_prob)?;
                if *hot_pages == 0 || *hot_pages > footprint {
                    return Err(TraceError::Spec(format!(
                        "hot_pages must be in 1..={footprint}, got {hot_pages}"
                    )));
                }
                Ok(())
            }
            Pattern::Phased { phases } => {
                if phases.is_empty() {
                    return Err(TraceError::Spec("phased pattern needs at least one phase".into()));
                }
                for p in phases {
                    if p.events == 0 {
                        return Err(TraceError::Spec("phase event count must be positive".into()));
                    }
                    p.pattern.validate(footprint)?;
                }
                Ok(())
            }
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.footprint_pages == 0 {
            return Err(TraceError::Spec("footprint_pages must be at least 1".into()));
        }
        if self.page_size < 64 || !self.page_size.is_power_of_two() {
            return Err(TraceError::Spec(format!(
                "page_size must be a power of two >= 64, got {}",
                self.page_size
            )));
        }
        check_prob("write_ratio", self.write_ratio)?;
        if !(self.mean_icount >= 0.0 && self.mean_icount.is_finite()) {
            return Err(TraceError::Spec(format!(
                "mean_icount must be non-negative, got {}",
                self.mean_icount
            )));
        }
        self.pattern.validate(self.footprint_pages)
    }
}

/// Rank sampler for one non-phased pattern.
#[derive(Debug, Clone)]
enum Sampler {
    Uniform(u64),
    Zipf(Vec<f64>),
    HotSet { hot: u64, prob: f64, n: u64 },
}

impl Sampler {
    fn new(p: &Pattern, n: u64) -> Self {
        match p {
            Pattern::Uniform => Sampler::Uniform(n),
            Pattern::Zipf { s } => {
                let mut acc = 0.0;
                let cdf = (1..=n)
                    .map(|k| {
                        acc += (k as f64).powf(-s);
                        acc
                    })
                    .collect();
                Sampler::Zipf(cdf)
            }
            Pattern::HotSet { hot_pages, hot_prob } => Sampler::HotSet {
                hot: *hot_pages,
                prob: *hot_prob,
                n,
            },
            Pattern::Phased { .. } => unreachable!("phases are flattened before sampling"),
        }
    }

    fn rank(&self, rng: &mut SplitMix64) -> u64 {
        match self {
            Sampler::Uniform(n) => rng.below(*n),
            Sampler::Zipf(cdf) => {
                let x = rng.unit() * cdf[cdf.len() - 1];
                (cdf.partition_point(|&c| c <= x) as u64).min(cdf.len() as u64 - 1)
            }
            Sampler::HotSet { hot, prob, n } => {
                let hot_draw = rng.unit() < *prob;
                if hot_draw || hot == n {
                    rng.below(*hot)
                } else {
                    hot + rng.below(n - hot)
                }
            }
        }
    }
}

fn permutation(n: u64, seed: u64) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    let mut p: Vec<u64> = (0..n).collect();
    for i in (1..p.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        p.swap(i, j);
    }
    p
}

fn geometric(rng: &mut SplitMix64, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // Failures before the first success with p = 1 / (mean + 1).
    let u = 1.0 - rng.unit();
    (u.ln() / (mean / (mean + 1.0)).ln()).floor() as u64
}

struct Segment {
    sampler: Sampler,
    perm: Vec<u64>,
    events: u64,
}

/// Generates one trace per core.
pub fn generate(spec: &TraceSpec, cores: usize) -> Result<Vec<Vec<TraceEvent>>, TraceError> {
    spec.validate()?;
    let n = spec.footprint_pages;
    let segments: Vec<Segment> = match &spec.pattern {
        Pattern::Phased { phases } => phases
            .iter()
            .enumerate()
            .map(|(i, ph)| Segment {
                sampler: Sampler::new(&flatten(&ph.pattern), n),
                perm: permutation(n, mix64(spec.seed ^ (i as u64 + 1))),
                events: ph.events,
            })
            .collect(),
        p => vec![Segment {
            sampler: Sampler::new(p, n),
            perm: permutation(n, spec.seed),
            events: u64::MAX,
        }],
    };
    let lines = spec.page_size / 64;
    let page_shift = spec.page_size.trailing_zeros();
    Ok((0..cores)
        .map(|c| {
            let mut rng = SplitMix64::new(mix64(spec.seed.wrapping_add((c as u64 + 1).wrapping_mul(GAMMA))));
            let mut seg = 0;
            let mut left = segments[0].events;
            (0..spec.events_per_core)
                .map(|_| {
                    if left == 0 {
                        seg = (seg + 1) % segments.len();
                        left = segments[seg].events;
                    }
                    left -= 1;
                    let s = &segments[seg];
                    let page = s.perm[s.sampler.rank(&mut rng) as usize];
                    let line = rng.below(lines);
                    let word = rng.below(8);
                    let rw = if rng.unit() < spec.write_ratio {
                        Rw::Write
                    } else {
                        Rw::Read
                    };
                    let icount = geometric(&mut rng, spec.mean_icount);
                    TraceEvent {
                        core: c as u32,
                        rw,
                        vaddr: (page << page_shift) | (line << 6) | (word << 3),
                        icount,
                    }
                })
                .collect()
        })
        .collect())
}

/// Nested phased patterns flatten to their first phase's pattern.
fn flatten(p: &Pattern) -> Pattern {
    match p {
        Pattern::Phased { phases } => flatten(&phases[0].pattern),
        other => other.clone(),
    }
}

/// Round-robin merge of per-core traces: event i of every core, then i + 1.
pub fn interleave(per_core: &[Vec<TraceEvent>]) -> Vec<TraceEvent> {
    let longest = per_core.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(per_core.iter().map(Vec::len).sum());
    for i in 0..longest {
        out.extend(per_core.iter().filter_map(|t| t.get(i)));
    }
    out
}

/// Splits a file-order trace into per-core lists, keeping each core's order.
pub fn split_by_core(events: &[TraceEvent], cores: usize) -> Result<Vec<Vec<TraceEvent>>, crate::error::SimError> {
    let mut out = vec![Vec::new(); cores];
    for e in events {
        let c = e.core as usize;
        if c >= cores {
            return Err(crate::error::SimError::CoreOutOfRange { core: c, cores });
        }
        out[c].push(*e);
    }
    Ok(out)
}

pub fn format_event(e: &TraceEvent) -> String {
    let op = match e.rw {
        Rw::Read => 'R',
        Rw::Write => 'W',
    };
    format!("{},{},{:#X},{}", e.core, op, e.vaddr, e.icount).replacen("0X", "0x", 1)
}

pub fn parse_event(s: &str, line: usize) -> Result<TraceEvent, TraceError> {
    let bad = |reason: String| TraceError::Malformed { line, reason };
    let mut it = s.split(',');
    let (Some(core), Some(op), Some(addr), Some(ic), None) = (it.next(), it.next(), it.next(), it.next(), it.next())
    else {
        return Err(bad(format!("expected 4 comma-separated fields in `{s}`")));
    };
    let core = core.parse().map_err(|_| bad(format!("bad core `{core}`")))?;
    let rw = match op {
        "R" => Rw::Read,
        "W" => Rw::Write,
        _ => return Err(bad(format!("bad op `{op}` (expected R or W)"))),
    };
    let hex = addr
        .strip_prefix("0x")
        .or_else(|| addr.strip_prefix("0X"))
        .ok_or_else(|| bad(format!("address `{addr}` must start with 0x")))?;
    let vaddr = u64::from_str_radix(hex, 16).map_err(|_| bad(format!("bad address `{addr}`")))?;
    let icount = ic.parse().map_err(|_| bad(format!("bad icount `{ic}`")))?;
    Ok(TraceEvent {
        core,
        rw,
        vaddr,
        icount,
    })
}

pub fn write_trace_to<W: Write>(events: &[TraceEvent], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for e in events {
        writeln!(w, "{}", format_event(e))?;
    }
    w.flush()
}

pub fn write_trace(events: &[TraceEvent], path: &Path) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = File::create(path).map_err(io)?;
    write_trace_to(events, BufWriter::new(f)).map_err(io)
}

/// Streaming reader: one line in memory at a time.
pub fn read_trace_from<R: BufRead>(r: R) -> Result<Vec<TraceEvent>, TraceError> {
    let mut lines = r.lines();
    let io = |source| TraceError::Io {
        path: "<stream>".into(),
        source,
    };
    let header = lines.next().transpose().map_err(io)?.unwrap_or_default();
    if header != TRACE_HEADER {
        return Err(TraceError::Version {
            expected: TRACE_HEADER,
            found: header,
        });
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(io)?;
        if l.is_empty() {
            continue;
        }
        out.push(parse_event(&l, i + 2)?);
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let f = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace_from(BufReader::new(f)).map_err(|e| match e {
        TraceError::Io { source, .. } => TraceError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern) -> TraceSpec {
        TraceSpec {
            pattern,
            footprint_pages: 100,
            events_per_core: 1000,
            write_ratio: 0.25,
            mean_icount: 3.0,
            seed: 7,
            page_size: 4096,
        }
    }

    #[test]
    fn parses_the_documented_line() {
        let e = parse_event("0,R,0x1F400,12", 2).unwrap();
        assert_eq!(
            e,
            TraceEvent {
                core: 0,
                rw: Rw::Read,
                vaddr: 0x1F400,
                icount: 12
            }
        );
        assert_eq!(format_event(&e), "0,R,0x1F400,12");
    }

    #[test]
    fn malformed_lines_name_their_number() {
        let text = format!("{TRACE_HEADER}\n0,R,0x10,1\n1,X,0x10,1\n");
        match read_trace_from(text.as_bytes()) {
            Err(TraceError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_header_is_a_version_error() {
        assert!(matches!(
            read_trace_from("0,R,0x10,1\n".as_bytes()),
            Err(TraceError::Version { .. })
        ));
        assert!(matches!(
            read_trace_from("#duon-trace v2\n".as_bytes()),
            Err(TraceError::Version { .. })
        ));
    }

    #[test]
    fn hot_set_with_certain_probability_stays_hot() {
        let s = spec(Pattern::HotSet {
            hot_pages: 10,
            hot_prob: 1.0,
        });
        let t = generate(&s, 2).unwrap();
        let pages: std::collections::BTreeSet<u64> = t.iter().flatten().map(|e| e.vaddr >> 12).collect();
        assert!(pages.len() <= 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(Pattern::Zipf { s: 0.9 });
        assert_eq!(generate(&s, 3).unwrap(), generate(&s, 3).unwrap());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate(&s, 3).unwrap(), generate(&other, 3).unwrap());
    }

    #[test]
    fn geometric_mean_is_close() {
        let mut r = SplitMix64::new(1);
        let n = 200_000;
        let mean = (0..n).map(|_| geometric(&mut r, 4.0)).sum::<u64>() as f64 / n as f64;
        assert!((mean - 4.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn phases_move_the_hot_set() {
        let s = TraceSpec {
            pattern: Pattern::Phased {
                phases: vec![
                    Phase {
                        pattern: Pattern::HotSet {
                            hot_pages: 1,
                            hot_prob: 1.0,
                        },
                        events: 50,
                    },
                    Phase {
                        pattern: Pattern::HotSet {
                            hot_pages: 1,
                            hot_prob: 1.0,
                        },
                        events: 50,
                    },
                ],
            },
            ..spec(Pattern::Uniform)
        };
        let t = &generate(&s, 1).unwrap()[0];
        assert!(t[..50].iter().all(|e| e.vaddr >> 12 == t[0].vaddr >> 12));
        assert!(t[50..100].iter().all(|e| e.vaddr >> 12 == t[50].vaddr >> 12));
        assert_ne!(t[0].vaddr >> 12, t[50].vaddr >> 12);
        assert_eq!(t[100].vaddr >> 12, t[0].vaddr >> 12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(spec(Pattern::Zipf { s: 0.0 }).validate().is_err());
        assert!(spec(Pattern::HotSet {
            hot_pages: 0,
            hot_prob: 0.5
        })
        .validate()
        .is_err());
        assert!(spec(Pattern::HotSet {
            hot_pages: 5,
            hot_prob: 1.5
        })
        .validate()
        .is_err());
        let mut s = spec(Pattern::Uniform);
        s.footprint_pages = 0;
        assert!(s.validate().is_err());
    }
}
