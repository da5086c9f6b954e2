//! Extended page table, per-core extended TLBs and the LLC-miss address
//! resolution.
//!
//! Both structures keep the unified page (UA) as the primary translation and
//! carry the remapped frame (RA) with its migration flags alongside. Caches
//! only ever see the UA; the RA is consulted on the memory side of an LLC
//! miss.

use rustc_hash::FxHashMap;

use crate::address_space::{default_frame_of, MemoryGeometry, PhysicalFrame, UnifiedPageId, VirtualPageId};
use crate::error::TranslationError;
use crate::migration::BitVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BufferKind {
    Hot,
    Cold,
}

impl BufferKind {
    /// Encoding of the buffer-residency flag: hot = 1, cold = 0.
    pub fn from_flag(flag: bool) -> Self {
        if flag {
            Self::Hot
        } else {
            Self::Cold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EptEntry {
    pub vpn: VirtualPageId,
    pub ua: UnifiedPageId,
    pub valid: bool,
    pub dirty: bool,
    pub ra: Option<PhysicalFrame>,
    pub migrated: bool,
    pub ongoing_migration: bool,
    pub pair: bool,
    /// true = hot buffer, false = cold buffer.
    pub buffer_residency: bool,
}

impl EptEntry {
    pub fn fresh(vpn: VirtualPageId, ua: UnifiedPageId) -> Self {
        Self {
            vpn,
            ua,
            valid: true,
            dirty: false,
            ra: None,
            migrated: false,
            ongoing_migration: false,
            pair: false,
            buffer_residency: false,
        }
    }

    /// (migrated, ongoing, pair, buffer residency)
    pub fn flag_tuple(&self) -> (bool, bool, bool, bool) {
        (self.migrated, self.ongoing_migration, self.pair, self.buffer_residency)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub vpn: VirtualPageId,
    pub ua: UnifiedPageId,
    pub valid: bool,
    pub dirty: bool,
    pub ra: Option<PhysicalFrame>,
    pub migrated: bool,
    pub ongoing_migration: bool,
}

impl From<&EptEntry> for TlbEntry {
    fn from(e: &EptEntry) -> Self {
        Self {
            vpn: e.vpn,
            ua: e.ua,
            valid: e.valid,
            dirty: e.dirty,
            ra: e.ra,
            migrated: e.migrated,
            ongoing_migration: e.ongoing_migration,
        }
    }
}

/// Fields the LLC-miss resolution needs from either structure.
pub trait MappingFlags {
    fn ua(&self) -> UnifiedPageId;
    fn ra(&self) -> Option<PhysicalFrame>;
    fn migrated(&self) -> bool;
    fn ongoing_migration(&self) -> bool;
}

impl MappingFlags for EptEntry {
    fn ua(&self) -> UnifiedPageId {
        self.ua
    }
    fn ra(&self) -> Option<PhysicalFrame> {
        self.ra
    }
    fn migrated(&self) -> bool {
        self.migrated
    }
    fn ongoing_migration(&self) -> bool {
        self.ongoing_migration
    }
}

impl MappingFlags for TlbEntry {
    fn ua(&self) -> UnifiedPageId {
        self.ua
    }
    fn ra(&self) -> Option<PhysicalFrame> {
        self.ra
    }
    fn migrated(&self) -> bool {
        self.migrated
    }
    fn ongoing_migration(&self) -> bool {
        self.ongoing_migration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbLookup {
    Hit(TlbEntry),
    Miss,
}

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Slot {
    entry: TlbEntry,
    prev: u32,
    next: u32,
}

/// Fully associative TLB with exact LRU replacement.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    slots: Vec<Slot>,
    index: FxHashMap<u64, u32>,
    free: Vec<u32>,
    /// most recently used
    head: u32,
    /// least recently used
    tail: u32,
    pub hits: u64,
    pub misses: u64,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0 && capacity < NIL as usize);
        Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            index: FxHashMap::default(),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn unlink(&mut self, i: u32) {
        let (prev, next) = {
            let s = &self.slots[i as usize];
            (s.prev, s.next)
        };
        if prev != NIL {
            self.slots[prev as usize].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.slots[next as usize].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn push_front(&mut self, i: u32) {
        self.slots[i as usize].prev = NIL;
        self.slots[i as usize].next = self.head;
        if self.head != NIL {
            self.slots[self.head as usize].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    /// Looks up `vpn`, refreshing recency on a hit.
    pub fn lookup(&mut self, vpn: VirtualPageId) -> TlbLookup {
        match self.index.get(&vpn.0) {
            Some(&i) => {
                self.hits += 1;
                if self.head != i {
                    self.unlink(i);
                    self.push_front(i);
                }
                TlbLookup::Hit(self.slots[i as usize].entry)
            }
            None => {
                self.misses += 1;
                TlbLookup::Miss
            }
        }
    }

    /// Reads an entry without touching recency or counters.
    pub fn peek(&self, vpn: VirtualPageId) -> Option<&TlbEntry> {
        self.index.get(&vpn.0).map(|&i| &self.slots[i as usize].entry)
    }

    pub fn peek_mut(&mut self, vpn: VirtualPageId) -> Option<&mut TlbEntry> {
        match self.index.get(&vpn.0) {
            Some(&i) => Some(&mut self.slots[i as usize].entry),
            None => None,
        }
    }

    /// Installs or replaces the entry for `entry.vpn` as most recently used.
    /// Returns the evicted entry when the TLB was full.
    pub fn fill(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        if let Some(&i) = self.index.get(&entry.vpn.0) {
            self.slots[i as usize].entry = entry;
            if self.head != i {
                self.unlink(i);
                self.push_front(i);
            }
            return None;
        }
        let mut evicted = None;
        let slot = if let Some(i) = self.free.pop() {
            self.slots[i as usize].entry = entry;
            i
        } else if self.slots.len() < self.capacity {
            self.slots.push(Slot {
                entry,
                prev: NIL,
                next: NIL,
            });
            (self.slots.len() - 1) as u32
        } else {
            let victim = self.tail;
            self.unlink(victim);
            let old = std::mem::replace(&mut self.slots[victim as usize].entry, entry);
            self.index.remove(&old.vpn.0);
            evicted = Some(old);
            victim
        };
        self.index.insert(entry.vpn.0, slot);
        self.push_front(slot);
        evicted
    }

    pub fn invalidate(&mut self, vpn: VirtualPageId) -> bool {
        match self.index.remove(&vpn.0) {
            Some(i) => {
                self.unlink(i);
                self.free.push(i);
                true
            }
            None => false,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.index.values().map(|&i| &self.slots[i as usize].entry)
    }

    /// VPNs from most to least recently used.
    pub fn recency_order(&self) -> Vec<VirtualPageId> {
        let mut out = Vec::with_capacity(self.len());
        let mut i = self.head;
        while i != NIL {
            out.push(self.slots[i as usize].entry.vpn);
            i = self.slots[i as usize].next;
        }
        out
    }
}

/// The extended page table, a flat map vpn -> entry with a UA back-index.
#[derive(Debug, Default, Clone)]
pub struct ExtendedPageTable {
    entries: FxHashMap<u64, EptEntry>,
    by_ua: FxHashMap<u64, u64>,
    pub walks: u64,
}

impl ExtendedPageTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A page walk: counts the walk and returns the valid entry.
    pub fn lookup(&mut self, vpn: VirtualPageId) -> Result<EptEntry, TranslationError> {
        self.walks += 1;
        self.get(vpn).copied().ok_or(TranslationError::PageFault(vpn.0))
    }

    pub fn get(&self, vpn: VirtualPageId) -> Option<&EptEntry> {
        self.entries.get(&vpn.0).filter(|e| e.valid)
    }

    pub fn get_mut(&mut self, vpn: VirtualPageId) -> Option<&mut EptEntry> {
        self.entries.get_mut(&vpn.0).filter(|e| e.valid)
    }

    pub fn vpn_of(&self, ua: UnifiedPageId) -> Option<VirtualPageId> {
        self.by_ua.get(&ua.0).map(|&v| VirtualPageId(v))
    }

    pub fn entry_by_ua(&self, ua: UnifiedPageId) -> Option<&EptEntry> {
        self.vpn_of(ua).and_then(|v| self.get(v))
    }

    pub fn insert(&mut self, entry: EptEntry) {
        if let Some(old) = self.entries.insert(entry.vpn.0, entry) {
            self.by_ua.remove(&old.ua.0);
        }
        self.by_ua.insert(entry.ua.0, entry.vpn.0);
    }

    pub fn remove(&mut self, vpn: VirtualPageId) -> Option<EptEntry> {
        let old = self.entries.remove(&vpn.0)?;
        self.by_ua.remove(&old.ua.0);
        Some(old)
    }

    /// Points `vpn` at a different unified page, keeping the back-index.
    pub fn relabel(&mut self, vpn: VirtualPageId, ua: UnifiedPageId) {
        if let Some(e) = self.entries.get_mut(&vpn.0) {
            if self.by_ua.get(&e.ua.0) == Some(&vpn.0) {
                self.by_ua.remove(&e.ua.0);
            }
            e.ua = ua;
            self.by_ua.insert(ua.0, vpn.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &EptEntry> {
        self.entries.values().filter(|e| e.valid)
    }

    /// Entries sorted by vpn.
    pub fn sorted(&self) -> Vec<EptEntry> {
        let mut v: Vec<_> = self.iter().copied().collect();
        v.sort_by_key(|e| e.vpn);
        v
    }

    pub fn mark_migration_start(
        &mut self,
        vpn: VirtualPageId,
        pair: bool,
        residency: bool,
    ) -> Result<EptEntry, TranslationError> {
        let e = self.get_mut(vpn).ok_or(TranslationError::PageFault(vpn.0))?;
        if e.ongoing_migration {
            return Err(TranslationError::Conflict(vpn.0));
        }
        e.ongoing_migration = true;
        e.pair = pair;
        e.buffer_residency = residency;
        Ok(*e)
    }

    /// Records the remapped frame ahead of completion (data already moved).
    pub fn set_remapped(&mut self, vpn: VirtualPageId, ra: PhysicalFrame) -> Result<(), TranslationError> {
        let e = self.get_mut(vpn).ok_or(TranslationError::PageFault(vpn.0))?;
        e.ra = Some(ra);
        Ok(())
    }

    pub fn mark_migration_complete(
        &mut self,
        vpn: VirtualPageId,
        ra: PhysicalFrame,
        pair: bool,
    ) -> Result<EptEntry, TranslationError> {
        let e = self.get_mut(vpn).ok_or(TranslationError::PageFault(vpn.0))?;
        if !e.ongoing_migration {
            return Err(TranslationError::State {
                vpn: vpn.0,
                reason: "migration complete on a page that is not migrating",
            });
        }
        e.ra = Some(ra);
        e.migrated = true;
        e.ongoing_migration = false;
        e.pair = pair;
        e.buffer_residency = false;
        Ok(*e)
    }
}

impl ExtendedPageTable {
    /// Completion for the incoming page of a pair swap. That page keeps its
    /// ongoing flag clear for the whole swap (its requests are served from
    /// the source frame until each line lands), so it enters completion idle.
    pub fn complete_pair_incoming(
        &mut self,
        vpn: VirtualPageId,
        ra: PhysicalFrame,
    ) -> Result<EptEntry, TranslationError> {
        let e = self.get_mut(vpn).ok_or(TranslationError::PageFault(vpn.0))?;
        if e.ongoing_migration {
            return Err(TranslationError::State {
                vpn: vpn.0,
                reason: "incoming page of a pair swap must not be flagged ongoing",
            });
        }
        e.ra = Some(ra);
        e.migrated = true;
        e.pair = true;
        e.buffer_residency = false;
        Ok(*e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryTarget {
    FrameAccess { frame: PhysicalFrame, line: u32 },
    BufferAccess { which: BufferKind, line: u32 },
    StallUntilBuffered,
}

/// What the migration controller knows about a page it is moving.
#[derive(Debug, Clone, Copy)]
pub struct InFlight<'a> {
    pub destination: PhysicalFrame,
    pub landed: &'a BitVector,
    pub residency: BufferKind,
    pub buffer_holds_line: bool,
}

/// LLC-miss resolution from the migration flags.
pub fn resolve_memory_target<M: MappingFlags>(
    entry: &M,
    line: u32,
    inflight: Option<InFlight<'_>>,
    geom: &MemoryGeometry,
) -> MemoryTarget {
    if entry.ongoing_migration() {
        return match inflight {
            Some(f) if f.landed.get(line) => MemoryTarget::FrameAccess {
                frame: f.destination,
                line,
            },
            Some(f) if f.buffer_holds_line => MemoryTarget::BufferAccess {
                which: f.residency,
                line,
            },
            _ => MemoryTarget::StallUntilBuffered,
        };
    }
    let frame = match (entry.migrated(), entry.ra()) {
        (true, Some(ra)) => ra,
        _ => default_frame_of(entry.ua(), geom).expect("valid entries carry in-range unified pages"),
    };
    MemoryTarget::FrameAccess { frame, line }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn te(vpn: u64) -> TlbEntry {
        TlbEntry::from(&EptEntry::fresh(VirtualPageId(vpn), UnifiedPageId(vpn)))
    }

    /// Reference LRU: a plain Vec with MRU at the front.
    struct RefLru {
        cap: usize,
        order: Vec<u64>,
    }

    impl RefLru {
        fn touch(&mut self, vpn: u64) -> bool {
            if let Some(p) = self.order.iter().position(|&v| v == vpn) {
                self.order.remove(p);
                self.order.insert(0, vpn);
                true
            } else {
                false
            }
        }
        fn fill(&mut self, vpn: u64) {
            if !self.touch(vpn) {
                self.order.insert(0, vpn);
                self.order.truncate(self.cap);
            }
        }
    }

    #[test]
    fn hit_and_miss() {
        let mut t = Tlb::new(4);
        assert_eq!(t.lookup(VirtualPageId(1)), TlbLookup::Miss);
        t.fill(te(1));
        assert!(matches!(t.lookup(VirtualPageId(1)), TlbLookup::Hit(e) if e.vpn == VirtualPageId(1)));
        assert_eq!((t.hits, t.misses), (1, 1));
    }

    #[test]
    fn lru_evicts_after_capacity_distinct_fills() {
        let mut t = Tlb::new(4096);
        t.fill(te(7));
        for v in 1000..1000 + 4096 {
            t.fill(te(v));
        }
        assert_eq!(t.lookup(VirtualPageId(7)), TlbLookup::Miss);
        assert_eq!(t.len(), 4096);
    }

    proptest::proptest! {
        #[test]
        fn matches_reference_lru(ops in proptest::collection::vec((0u64..24, proptest::bool::ANY), 1..400)) {
            let mut t = Tlb::new(8);
            let mut r = RefLru { cap: 8, order: Vec::new() };
            for (vpn, is_fill) in ops {
                if is_fill {
                    t.fill(te(vpn));
                    r.fill(vpn);
                } else {
                    let hit = matches!(t.lookup(VirtualPageId(vpn)), TlbLookup::Hit(_));
                    proptest::prop_assert_eq!(hit, r.touch(vpn));
                }
                let order: Vec<u64> = t.recency_order().into_iter().map(|v| v.0).collect();
                proptest::prop_assert_eq!(&order, &r.order);
            }
        }
    }

    #[test]
    fn invalidate_then_refill_reuses_slot() {
        let mut t = Tlb::new(2);
        t.fill(te(1));
        t.fill(te(2));
        assert!(t.invalidate(VirtualPageId(1)));
        assert!(!t.invalidate(VirtualPageId(1)));
        assert_eq!(t.fill(te(3)), None);
        assert_eq!(t.fill(te(4)).map(|e| e.vpn), Some(VirtualPageId(2)));
    }

    fn geom() -> MemoryGeometry {
        MemoryGeometry::new(64 * 4096, 128 * 4096, 4096).unwrap()
    }

    #[test]
    fn ept_lookup_and_fault() {
        let mut ept = ExtendedPageTable::new();
        ept.insert(EptEntry::fresh(VirtualPageId(3), UnifiedPageId(9)));
        let e = ept.lookup(VirtualPageId(3)).unwrap();
        assert!(!e.migrated && e.ra.is_none());
        assert_eq!(ept.lookup(VirtualPageId(4)), Err(TranslationError::PageFault(4)));
        assert_eq!(ept.walks, 2);
        assert_eq!(ept.vpn_of(UnifiedPageId(9)), Some(VirtualPageId(3)));
    }

    #[test]
    fn migration_flag_transitions() {
        let mut ept = ExtendedPageTable::new();
        let vpn = VirtualPageId(1);
        ept.insert(EptEntry::fresh(vpn, UnifiedPageId(50)));
        let e = ept.mark_migration_start(vpn, true, true).unwrap();
        assert_eq!(e.flag_tuple(), (false, true, true, true));
        assert_eq!(
            ept.mark_migration_start(vpn, true, true),
            Err(TranslationError::Conflict(1))
        );
        let e = ept
            .mark_migration_complete(vpn, PhysicalFrame::slow(100), true)
            .unwrap();
        assert_eq!(e.flag_tuple(), (true, false, true, false));
        assert_eq!(e.ra, Some(PhysicalFrame::slow(100)));
        // Re-migration keeps migrated = 1 while ongoing.
        let e = ept.mark_migration_start(vpn, false, false).unwrap();
        assert_eq!(e.flag_tuple(), (true, true, false, false));
        let e = ept.mark_migration_complete(vpn, PhysicalFrame::fast(3), false).unwrap();
        assert_eq!(e.flag_tuple(), (true, false, false, false));
        // Completing an idle one-way page is a state error.
        assert!(matches!(
            ept.mark_migration_complete(vpn, PhysicalFrame::fast(3), false),
            Err(TranslationError::State { .. })
        ));
    }

    #[test]
    fn resolve_cases() {
        let g = geom();
        let mut e = EptEntry::fresh(VirtualPageId(1), UnifiedPageId(70));
        assert_eq!(
            resolve_memory_target(&e, 5, None, &g),
            MemoryTarget::FrameAccess {
                frame: PhysicalFrame::slow(6),
                line: 5
            }
        );
        e.migrated = true;
        e.ra = Some(PhysicalFrame::slow(100));
        assert_eq!(
            resolve_memory_target(&e, 3, None, &g),
            MemoryTarget::FrameAccess {
                frame: PhysicalFrame::slow(100),
                line: 3
            }
        );

        e.ongoing_migration = true;
        let mut bits = BitVector::new(64);
        fn f(bits: &BitVector, holds: bool) -> InFlight<'_> {
            InFlight {
                destination: PhysicalFrame::fast(50),
                landed: bits,
                residency: BufferKind::Hot,
                buffer_holds_line: holds,
            }
        }
        assert_eq!(
            resolve_memory_target(&e, 3, Some(f(&bits, true)), &g),
            MemoryTarget::BufferAccess {
                which: BufferKind::Hot,
                line: 3
            }
        );
        assert_eq!(
            resolve_memory_target(&e, 3, Some(f(&bits, false)), &g),
            MemoryTarget::StallUntilBuffered
        );
        bits.set(3);
        assert_eq!(
            resolve_memory_target(&e, 3, Some(f(&bits, true)), &g),
            MemoryTarget::FrameAccess {
                frame: PhysicalFrame::fast(50),
                line: 3
            }
        );
    }
}
