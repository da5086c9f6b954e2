//! Backing store for both tiers plus the ground-truth UA -> frame map and the
//! unified-page allocator.

use std::collections::BTreeSet;

use rustc_hash::FxHashMap;

use crate::address_space::{default_frame_of, ua_of_default_frame, MemoryGeometry, PhysicalFrame, Tier, UnifiedPageId};

pub const WORDS_PER_LINE: usize = 8;
pub const LINE_BYTES: u64 = 64;

/// Contents of one 64-byte line as eight 64-bit words.
pub type LineData = [u64; WORDS_PER_LINE];

#[derive(Debug, Clone)]
pub struct FrameStore {
    lines_per_page: usize,
    pages: FxHashMap<u64, Box<[LineData]>>,
}

impl FrameStore {
    pub fn new(lines_per_page: usize) -> Self {
        Self {
            lines_per_page,
            pages: FxHashMap::default(),
        }
    }

    pub fn read(&self, frame_index: u64, line: u32) -> LineData {
        self.pages
            .get(&frame_index)
            .map_or([0; WORDS_PER_LINE], |p| p[line as usize])
    }

    pub fn write(&mut self, frame_index: u64, line: u32, data: LineData) {
        let lpp = self.lines_per_page;
        self.pages
            .entry(frame_index)
            .or_insert_with(|| vec![[0; WORDS_PER_LINE]; lpp].into_boxed_slice())[line as usize] = data;
    }

    pub fn read_page(&self, frame_index: u64) -> Option<Box<[LineData]>> {
        self.pages.get(&frame_index).cloned()
    }

    pub fn write_page(&mut self, frame_index: u64, data: Option<Box<[LineData]>>) {
        match data {
            Some(d) => {
                self.pages.insert(frame_index, d);
            }
            None => {
                self.pages.remove(&frame_index);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocPolicy {
    /// Lowest free unified page first (fast tier fills first).
    Sequential,
    /// Uniformly random free unified page, from the run seed.
    Random,
}

/// Physical memory: data, the UA -> frame permutation and UA allocation.
#[derive(Debug, Clone)]
pub struct PhysicalMemory {
    geom: MemoryGeometry,
    pub store: FrameStore,
    /// UAs whose frame differs from their default frame.
    remapped: FxHashMap<u64, PhysicalFrame>,
    /// Inverse of `remapped`, keyed by dense frame index.
    owner: FxHashMap<u64, u64>,
    allocated: Vec<u64>,
    allocated_count: u64,
    /// Fast frames whose owning UA is unallocated.
    free_fast: BTreeSet<u64>,
    alloc: AllocPolicy,
    rng: crate::rng::SplitMix64,
}

impl PhysicalMemory {
    pub fn new(geom: MemoryGeometry, lines_per_page: usize, alloc: AllocPolicy, seed: u64) -> Self {
        let words = geom.total_pages().div_ceil(64) as usize;
        Self {
            geom,
            store: FrameStore::new(lines_per_page),
            remapped: FxHashMap::default(),
            owner: FxHashMap::default(),
            allocated: vec![0; words],
            allocated_count: 0,
            free_fast: (0..geom.fast_pages).collect(),
            alloc,
            rng: crate::rng::SplitMix64::new(seed ^ 0xA110_C8ED),
        }
    }

    pub fn geometry(&self) -> &MemoryGeometry {
        &self.geom
    }

    /// Where `ua`'s data lives right now.
    pub fn frame_of(&self, ua: UnifiedPageId) -> PhysicalFrame {
        match self.remapped.get(&ua.0) {
            Some(&f) => f,
            None => default_frame_of(ua, &self.geom).expect("ua in range"),
        }
    }

    pub fn frame_index_of(&self, ua: UnifiedPageId) -> u64 {
        self.geom.frame_index(self.frame_of(ua))
    }

    /// The UA currently backed by `frame`.
    pub fn owner_of(&self, frame: PhysicalFrame) -> UnifiedPageId {
        let idx = self.geom.frame_index(frame);
        match self.owner.get(&idx) {
            Some(&ua) => UnifiedPageId(ua),
            None => ua_of_default_frame(frame, &self.geom).expect("frame in range"),
        }
    }

    pub fn is_remapped(&self, ua: UnifiedPageId) -> bool {
        self.remapped.contains_key(&ua.0)
    }

    pub fn remapped_count(&self) -> usize {
        self.remapped.len()
    }

    fn set_frame(&mut self, ua: UnifiedPageId, frame: PhysicalFrame) {
        let idx = self.geom.frame_index(frame);
        if default_frame_of(ua, &self.geom).expect("ua in range") == frame {
            self.remapped.remove(&ua.0);
            self.owner.remove(&idx);
        } else {
            self.remapped.insert(ua.0, frame);
            self.owner.insert(idx, ua.0);
        }
    }

    /// Exchanges the frames backing two UAs.
    pub fn swap_frames(&mut self, a: UnifiedPageId, b: UnifiedPageId) {
        let fa = self.frame_of(a);
        let fb = self.frame_of(b);
        // Clear both inverse entries before writing so neither insert is lost.
        self.owner.remove(&self.geom.frame_index(fa));
        self.owner.remove(&self.geom.frame_index(fb));
        self.set_frame(a, fb);
        self.set_frame(b, fa);
        self.refresh_free_fast(fa);
        self.refresh_free_fast(fb);
    }

    fn refresh_free_fast(&mut self, frame: PhysicalFrame) {
        if frame.tier != Tier::Fast {
            return;
        }
        if self.is_allocated(self.owner_of(frame)) {
            self.free_fast.remove(&frame.frame);
        } else {
            self.free_fast.insert(frame.frame);
        }
    }

    pub fn is_allocated(&self, ua: UnifiedPageId) -> bool {
        self.allocated[(ua.0 / 64) as usize] & (1 << (ua.0 % 64)) != 0
    }

    pub fn allocated_count(&self) -> u64 {
        self.allocated_count
    }

    fn mark(&mut self, ua: UnifiedPageId, on: bool) {
        let w = &mut self.allocated[(ua.0 / 64) as usize];
        if on {
            *w |= 1 << (ua.0 % 64);
        } else {
            *w &= !(1 << (ua.0 % 64));
        }
        let f = self.frame_of(ua);
        self.refresh_free_fast(f);
    }

    fn next_free_from(&self, start: u64) -> Option<u64> {
        let total = self.geom.total_pages();
        let mut ua = start;
        for _ in 0..2 {
            while ua < total {
                let w = self.allocated[(ua / 64) as usize];
                if w == u64::MAX {
                    ua = (ua / 64 + 1) * 64;
                    continue;
                }
                if w & (1 << (ua % 64)) == 0 {
                    return Some(ua);
                }
                ua += 1;
            }
            ua = 0;
        }
        None
    }

    /// Allocates a unified page according to the allocation policy.
    pub fn allocate(&mut self) -> Option<UnifiedPageId> {
        if self.allocated_count == self.geom.total_pages() {
            return None;
        }
        let start = match self.alloc {
            AllocPolicy::Sequential => 0,
            AllocPolicy::Random => self.rng.below(self.geom.total_pages()),
        };
        let ua = UnifiedPageId(self.next_free_from(start)?);
        self.mark(ua, true);
        self.allocated_count += 1;
        Some(ua)
    }

    /// Claims a specific unified page (scripted setups).
    pub fn allocate_at(&mut self, ua: UnifiedPageId) -> bool {
        if self.is_allocated(ua) {
            return false;
        }
        self.mark(ua, true);
        self.allocated_count += 1;
        true
    }

    /// Returns a unified page to the free pool.
    pub fn release(&mut self, ua: UnifiedPageId) -> bool {
        if !self.is_allocated(ua) {
            return false;
        }
        self.mark(ua, false);
        self.allocated_count -= 1;
        true
    }

    /// An unallocated UA currently backed by a fast frame, lowest frame first.
    pub fn free_fast_owner(&self) -> Option<UnifiedPageId> {
        self.free_fast
            .iter()
            .next()
            .map(|&f| self.owner_of(PhysicalFrame::fast(f)))
    }

    /// Applies a relabeling of UAs so that every UA is backed by its default
    /// frame again. Returns the (old UA, new UA) pairs that moved.
    pub fn canonicalize(&mut self) -> Vec<(UnifiedPageId, UnifiedPageId)> {
        let mut moves: Vec<(UnifiedPageId, UnifiedPageId)> = self
            .remapped
            .iter()
            .map(|(&ua, &f)| {
                (
                    UnifiedPageId(ua),
                    ua_of_default_frame(f, &self.geom).expect("frame in range"),
                )
            })
            .collect();
        moves.sort();
        let was_allocated: Vec<bool> = moves.iter().map(|(old, _)| self.is_allocated(*old)).collect();
        for (old, _) in &moves {
            let w = &mut self.allocated[(old.0 / 64) as usize];
            *w &= !(1 << (old.0 % 64));
        }
        for ((_, new), alloc) in moves.iter().zip(was_allocated) {
            if alloc {
                let w = &mut self.allocated[(new.0 / 64) as usize];
                *w |= 1 << (new.0 % 64);
            }
        }
        self.remapped.clear();
        self.owner.clear();
        moves
    }
}
