//! Private L1 data caches and a shared, inclusive LLC, all tagged by unified
//! line addresses.
//!
//! L1s are write-through and keep tags only; line data lives in the LLC.
//! Because the hierarchy is inclusive every L1 hit has a backing LLC line, so
//! cores always observe the single LLC copy.

use serde::{Deserialize, Serialize};

use crate::address_space::UnifiedPageId;
use crate::memory::{LineData, WORDS_PER_LINE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub l1_size: u64,
    pub l1_assoc: u64,
    pub l1_latency: u64,
    pub llc_size: u64,
    pub llc_assoc: u64,
    pub llc_latency: u64,
    pub line_size: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            l1_size: 32 << 10,
            l1_assoc: 4,
            l1_latency: 2,
            llc_size: 16 << 20,
            llc_assoc: 16,
            llc_latency: 21,
            line_size: 64,
        }
    }
}

impl CacheConfig {
    pub fn l1_sets(&self) -> u64 {
        self.l1_size / (self.l1_assoc * self.line_size)
    }

    pub fn llc_sets(&self) -> u64 {
        self.llc_size / (self.llc_assoc * self.line_size)
    }
}

/// A line address built from a unified page: `ua * lines_per_page + line`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UaLine(pub u64);

impl UaLine {
    pub fn new(ua: UnifiedPageId, line: u32, lines_per_page: u32) -> Self {
        Self(ua.0 * u64::from(lines_per_page) + u64::from(line))
    }

    pub fn page(&self, lines_per_page: u32) -> UnifiedPageId {
        UnifiedPageId(self.0 / u64::from(lines_per_page))
    }

    pub fn offset(&self, lines_per_page: u32) -> u32 {
        (self.0 % u64::from(lines_per_page)) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheLevel {
    L1Hit,
    LlcHit,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheAccess {
    pub level: CacheLevel,
    pub latency: u64,
}

const INVALID: u64 = u64::MAX;

#[derive(Debug, Clone)]
struct TagArray {
    sets: u64,
    ways: usize,
    tags: Vec<u64>,
    stamps: Vec<u64>,
}

impl TagArray {
    fn new(sets: u64, ways: u64) -> Self {
        let n = (sets * ways) as usize;
        Self {
            sets,
            ways: ways as usize,
            tags: vec![INVALID; n],
            stamps: vec![0; n],
        }
    }

    fn base(&self, line: UaLine) -> usize {
        (line.0 % self.sets) as usize * self.ways
    }

    fn find(&self, line: UaLine) -> Option<usize> {
        let b = self.base(line);
        (b..b + self.ways).find(|&i| self.tags[i] == line.0)
    }

    /// Empty way if any, else least recently stamped.
    fn victim(&self, line: UaLine) -> usize {
        let b = self.base(line);
        let mut best = b;
        for i in b..b + self.ways {
            if self.tags[i] == INVALID {
                return i;
            }
            if self.stamps[i] < self.stamps[best] {
                best = i;
            }
        }
        best
    }

    fn invalidate(&mut self, line: UaLine) -> bool {
        match self.find(line) {
            Some(i) => {
                self.tags[i] = INVALID;
                true
            }
            None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoreCacheStats {
    pub l1_hits: u64,
    pub llc_hits: u64,
    pub llc_misses: u64,
}

/// A dirty line pushed out of the LLC that must be written to memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Writeback {
    pub line: UaLine,
    pub data: LineData,
}

#[derive(Debug, Clone)]
pub struct CacheHierarchy {
    pub config: CacheConfig,
    l1: Vec<TagArray>,
    llc: TagArray,
    dirty: Vec<bool>,
    data: Vec<LineData>,
    clock: u64,
    pub stats: Vec<CoreCacheStats>,
    pub back_invalidations: u64,
}

impl CacheHierarchy {
    pub fn new(config: CacheConfig, cores: usize) -> Self {
        let llc = TagArray::new(config.llc_sets(), config.llc_assoc);
        let n = llc.tags.len();
        Self {
            l1: (0..cores)
                .map(|_| TagArray::new(config.l1_sets(), config.l1_assoc))
                .collect(),
            llc,
            dirty: vec![false; n],
            data: vec![[0; WORDS_PER_LINE]; n],
            clock: 0,
            stats: vec![CoreCacheStats::default(); cores],
            back_invalidations: 0,
            config,
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Looks the line up in the core's L1 then the LLC. An LLC hit fills the
    /// L1. A miss leaves the caches untouched; the caller fetches the line and
    /// calls [`CacheHierarchy::fill`].
    pub fn access(&mut self, core: usize, line: UaLine) -> CacheAccess {
        let now = self.tick();
        let cfg = self.config;
        if let Some(i) = self.l1[core].find(line) {
            self.l1[core].stamps[i] = now;
            if let Some(j) = self.llc.find(line) {
                self.llc.stamps[j] = now;
            }
            self.stats[core].l1_hits += 1;
            return CacheAccess {
                level: CacheLevel::L1Hit,
                latency: cfg.l1_latency,
            };
        }
        if let Some(j) = self.llc.find(line) {
            self.llc.stamps[j] = now;
            self.fill_l1(core, line, now);
            self.stats[core].llc_hits += 1;
            return CacheAccess {
                level: CacheLevel::LlcHit,
                latency: cfg.l1_latency + cfg.llc_latency,
            };
        }
        self.stats[core].llc_misses += 1;
        CacheAccess {
            level: CacheLevel::Miss,
            latency: cfg.l1_latency + cfg.llc_latency,
        }
    }

    fn fill_l1(&mut self, core: usize, line: UaLine, now: u64) {
        let l1 = &mut self.l1[core];
        let v = l1.victim(line);
        l1.tags[v] = line.0;
        l1.stamps[v] = now;
    }

    /// Installs a fetched line in the LLC and the core's L1. Returns the
    /// evicted LLC line when it was dirty; its L1 copies are back-invalidated.
    pub fn fill(&mut self, core: usize, line: UaLine, data: LineData) -> Option<Writeback> {
        let now = self.tick();
        debug_assert!(self.llc.find(line).is_none());
        let v = self.llc.victim(line);
        let mut wb = None;
        let old = self.llc.tags[v];
        if old != INVALID {
            let old_line = UaLine(old);
            for l1 in &mut self.l1 {
                if l1.invalidate(old_line) {
                    self.back_invalidations += 1;
                }
            }
            if self.dirty[v] {
                wb = Some(Writeback {
                    line: old_line,
                    data: self.data[v],
                });
            }
        }
        self.llc.tags[v] = line.0;
        self.llc.stamps[v] = now;
        self.dirty[v] = false;
        self.data[v] = data;
        self.fill_l1(core, line, now);
        wb
    }

    pub fn contains(&self, line: UaLine) -> bool {
        self.llc.find(line).is_some()
    }

    pub fn in_l1(&self, core: usize, line: UaLine) -> bool {
        self.l1[core].find(line).is_some()
    }

    pub fn read_word(&self, line: UaLine, word: usize) -> u64 {
        let i = self.llc.find(line).expect("read of a line the LLC does not hold");
        self.data[i][word]
    }

    /// Write-through from L1: updates the LLC copy and marks it dirty.
    pub fn write_word(&mut self, line: UaLine, word: usize, value: u64) {
        let i = self.llc.find(line).expect("write to a line the LLC does not hold");
        self.data[i][word] = value;
        self.dirty[i] = true;
    }

    pub fn is_dirty(&self, line: UaLine) -> bool {
        self.llc.find(line).is_some_and(|i| self.dirty[i])
    }

    /// Drops every line of `ua` from all levels. Dirty lines are returned for
    /// writeback; the count is of LLC lines removed.
    pub fn invalidate_page_lines(&mut self, ua: UnifiedPageId, lines_per_page: u32) -> (u64, Vec<Writeback>) {
        let mut invalidated = 0;
        let mut wbs = Vec::new();
        for off in 0..lines_per_page {
            let line = UaLine::new(ua, off, lines_per_page);
            if let Some(i) = self.llc.find(line) {
                invalidated += 1;
                if self.dirty[i] {
                    wbs.push(Writeback {
                        line,
                        data: self.data[i],
                    });
                }
                self.llc.tags[i] = INVALID;
                self.dirty[i] = false;
                for l1 in &mut self.l1 {
                    l1.invalidate(line);
                }
            }
        }
        (invalidated, wbs)
    }

    /// Dirty lines of the whole LLC in line-address order; caches are left
    /// clean.
    pub fn flush(&mut self) -> Vec<Writeback> {
        let mut out = Vec::new();
        for i in 0..self.llc.tags.len() {
            if self.llc.tags[i] != INVALID && self.dirty[i] {
                out.push(Writeback {
                    line: UaLine(self.llc.tags[i]),
                    data: self.data[i],
                });
                self.dirty[i] = false;
            }
        }
        out.sort_by_key(|w| w.line);
        out
    }

    /// Every valid L1 line is present in the LLC.
    pub fn check_inclusion(&self) -> bool {
        self.l1.iter().all(|l1| {
            l1.tags
                .iter()
                .filter(|&&t| t != INVALID)
                .all(|&t| self.llc.find(UaLine(t)).is_some())
        })
    }

    /// Valid lines of `ua` at any level.
    pub fn lines_of_page(&self, ua: UnifiedPageId, lines_per_page: u32) -> usize {
        (0..lines_per_page)
            .map(|o| UaLine::new(ua, o, lines_per_page))
            .filter(|&l| self.llc.find(l).is_some() || self.l1.iter().any(|a| a.find(l).is_some()))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CacheHierarchy {
        // L1: 4 sets x 4 ways; LLC: 16 sets x 4 ways.
        CacheHierarchy::new(
            CacheConfig {
                l1_size: 4 * 4 * 64,
                l1_assoc: 4,
                l1_latency: 2,
                llc_size: 16 * 4 * 64,
                llc_assoc: 4,
                llc_latency: 21,
                line_size: 64,
            },
            2,
        )
    }

    #[test]
    fn repeat_access_hits_l1() {
        let mut c = CacheHierarchy::new(CacheConfig::default(), 1);
        let l = UaLine(12345);
        assert_eq!(c.access(0, l).level, CacheLevel::Miss);
        c.fill(0, l, [0; 8]);
        let a = c.access(0, l);
        assert_eq!(
            a,
            CacheAccess {
                level: CacheLevel::L1Hit,
                latency: 2
            }
        );
    }

    /// Reference: one set as an LRU-ordered Vec.
    fn ref_set_access(set: &mut Vec<u64>, ways: usize, tag: u64) -> bool {
        if let Some(p) = set.iter().position(|&t| t == tag) {
            set.remove(p);
            set.insert(0, tag);
            true
        } else {
            set.insert(0, tag);
            set.truncate(ways);
            false
        }
    }

    #[test]
    fn fifth_line_in_a_set_evicts_the_first_from_l1_only() {
        let mut c = CacheHierarchy::new(CacheConfig::default(), 1);
        let sets = c.config.l1_sets();
        let lines: Vec<UaLine> = (0..5).map(|i| UaLine(7 + i * sets)).collect();
        let mut reference = Vec::new();
        for &l in &lines {
            assert_eq!(c.access(0, l).level, CacheLevel::Miss);
            c.fill(0, l, [0; 8]);
            ref_set_access(&mut reference, 4, l.0);
        }
        assert!(!ref_set_access(&mut reference, 4, lines[0].0));
        assert_eq!(c.access(0, lines[0]).level, CacheLevel::LlcHit);
        assert_eq!(c.access(0, lines[0]).latency, 2);
    }

    #[test]
    fn llc_eviction_back_invalidates_and_returns_dirty_data() {
        let mut c = small();
        let sets = c.config.llc_sets();
        let first = UaLine(3);
        c.access(1, first);
        c.fill(1, first, [5; 8]);
        c.write_word(first, 2, 99);
        let mut wb = None;
        for i in 1..=4 {
            let l = UaLine(3 + i * sets);
            c.access(0, l);
            if let Some(w) = c.fill(0, l, [0; 8]) {
                wb = Some(w);
            }
        }
        let wb = wb.expect("dirty eviction");
        assert_eq!(wb.line, first);
        assert_eq!(wb.data[2], 99);
        assert!(!c.in_l1(1, first));
        assert!(c.check_inclusion());
    }

    #[test]
    fn invalidate_page_counts_and_dirty_writebacks() {
        let mut c = CacheHierarchy::new(CacheConfig::default(), 2);
        let ua = UnifiedPageId(77);
        assert_eq!(c.invalidate_page_lines(ua, 64), (0, vec![]));
        for off in 0..64 {
            let l = UaLine::new(ua, off, 64);
            c.access((off % 2) as usize, l);
            c.fill((off % 2) as usize, l, [off as u64; 8]);
            if off < 10 {
                c.write_word(l, 0, 1000 + off as u64);
            }
        }
        let (n, wbs) = c.invalidate_page_lines(ua, 64);
        assert_eq!(n, 64);
        assert_eq!(wbs.len(), 10);
        assert_eq!(c.lines_of_page(ua, 64), 0);
        assert!(c.check_inclusion());
    }

    #[test]
    fn line_address_roundtrip() {
        let l = UaLine::new(UnifiedPageId(9), 63, 64);
        assert_eq!(l.page(64), UnifiedPageId(9));
        assert_eq!(l.offset(64), 63);
    }
}
