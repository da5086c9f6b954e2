//! The simulated system: memory, translation, caches, the migration
//! controller, the policy and (for the baseline) the remap table, wired
//! together along the lookup paths.
//!
//! All state changes happen here; the engine only decides which core goes
//! next and keeps the functional oracle.

use rustc_hash::FxHashMap;

use crate::address_space::{default_frame_of, MemoryGeometry, PhysicalFrame, Tier, UnifiedPageId, VirtualPageId};
use crate::cache::{CacheAccess, CacheHierarchy, CacheLevel, UaLine, Writeback};
use crate::coherence::{tlbs_agree, TlbCoherence};
use crate::config::SimConfig;
use crate::error::{SimError, TranslationError};
use crate::memory::{LineData, PhysicalMemory};
use crate::migration::{
    ControllerConfig, InterceptOutcome, JobPlan, MigrationController, MigrationJob, PageMove, RejectReason,
    RequestOutcome, Rw, SimEvent, TransferLatencies,
};
use crate::policy::{Policy, PolicyKind, ReconcileReport, RemapTable};
use crate::translation::{BufferKind, EptEntry, ExtendedPageTable, Tlb, TlbEntry, TlbLookup};
use crate::workload::TraceEvent;

/// Where a core's cycles went. The components always sum to its clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ledger {
    pub issue: u64,
    pub cache: u64,
    pub memory: u64,
    pub stall: u64,
    pub overhead: u64,
}

impl Ledger {
    pub fn total(&self) -> u64 {
        self.issue + self.cache + self.memory + self.stall + self.overhead
    }
}

#[derive(Debug, Clone, Default)]
pub struct CoreState {
    pub clock: u64,
    pub instructions: u64,
    pub events: u64,
    pub ledger: Ledger,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MachineStats {
    pub page_faults: u64,
    pub page_fault_evictions: u64,
    pub page_fault_lines_invalidated: u64,
    pub page_fault_tlb_invalidations: u64,
    pub migrations_started: u64,
    pub migrations_completed: u64,
    pub pair_migrations: u64,
    pub migration_stall_cycles: u64,
    pub contention_cycles: u64,
    pub rejected_already_fast: u64,
    pub rejected_in_flight: u64,
    pub rejected_not_resident: u64,
    pub reconciliations: u64,
    pub reconcile: ReconcileReport,
    pub shootdown_cycles: u64,
    pub invalidation_cycles: u64,
    pub coherence_checks: u64,
    pub memory_writebacks: u64,
}

/// The memory side of an LLC miss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemorySide {
    Frame(PhysicalFrame),
    Buffer(BufferKind),
}

/// What one memory event did, for tests and the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub vpn: VirtualPageId,
    pub ua: UnifiedPageId,
    pub tlb_hit: bool,
    pub page_fault: bool,
    /// Line address the caches were indexed and tagged with.
    pub cache_tag: UaLine,
    pub level: CacheLevel,
    pub memory: Option<MemorySide>,
    /// Value read, or value written.
    pub value: u64,
    pub cycles: u64,
    pub stall: u64,
}

/// Last access cycle of every mapped unified page, plus an LRU list in
/// access order so the least recently used page is found without a scan.
#[derive(Debug, Clone)]
struct Recency {
    last: FxHashMap<u64, u64>,
    /// ua -> (older neighbour, newer neighbour)
    links: FxHashMap<u64, (u64, u64)>,
    oldest: u64,
    newest: u64,
}

const NIL: u64 = u64::MAX;

impl Default for Recency {
    fn default() -> Self {
        Self {
            last: FxHashMap::default(),
            links: FxHashMap::default(),
            oldest: NIL,
            newest: NIL,
        }
    }
}

impl Recency {
    fn get(&self, ua: u64) -> Option<u64> {
        self.last.get(&ua).copied()
    }

    fn unlink(&mut self, ua: u64) -> bool {
        let Some((older, newer)) = self.links.remove(&ua) else {
            return false;
        };
        match older {
            NIL => self.oldest = newer,
            o => self.links.get_mut(&o).expect("linked").1 = newer,
        }
        match newer {
            NIL => self.newest = older,
            n => self.links.get_mut(&n).expect("linked").0 = older,
        }
        true
    }

    fn push_newest(&mut self, ua: u64) {
        self.links.insert(ua, (self.newest, NIL));
        match self.newest {
            NIL => self.oldest = ua,
            n => self.links.get_mut(&n).expect("linked").1 = ua,
        }
        self.newest = ua;
    }

    fn set(&mut self, ua: u64, t: u64) {
        self.last.insert(ua, t);
        if self.newest != ua {
            self.unlink(ua);
            self.push_newest(ua);
        }
    }

    fn remove(&mut self, ua: u64) -> Option<u64> {
        self.unlink(ua);
        self.last.remove(&ua)
    }

    /// Unified pages from least to most recently used.
    fn oldest_first(&self) -> impl Iterator<Item = UnifiedPageId> + '_ {
        std::iter::successors((self.oldest != NIL).then_some(self.oldest), |ua| {
            let next = self.links[ua].1;
            (next != NIL).then_some(next)
        })
        .map(UnifiedPageId)
    }

    /// Renames pages, keeping their place in the order.
    fn relabel(&mut self, moves: &[(UnifiedPageId, UnifiedPageId)]) {
        let map: FxHashMap<u64, u64> = moves.iter().map(|(o, n)| (o.0, n.0)).collect();
        let order: Vec<(u64, u64)> = self
            .oldest_first()
            .map(|ua| (map.get(&ua.0).copied().unwrap_or(ua.0), self.last[&ua.0]))
            .collect();
        *self = Self::default();
        for (ua, t) in order {
            self.set(ua, t);
        }
    }
}

pub struct Machine {
    cfg: SimConfig,
    geom: MemoryGeometry,
    lpp: u32,
    pub mem: PhysicalMemory,
    pub ept: ExtendedPageTable,
    pub tlbs: Vec<Tlb>,
    pub caches: CacheHierarchy,
    pub controller: MigrationController,
    pub policy: Policy,
    /// Present only for the reconciling baseline.
    pub remap: Option<RemapTable>,
    pub tcm: TlbCoherence,
    recency: Recency,
    swap: FxHashMap<u64, Option<Box<[LineData]>>>,
    pub cores: Vec<CoreState>,
    pub stats: MachineStats,
    xfer: TransferLatencies,
    reconcile_pending: bool,
    last_retire: u64,
    epoch_cycles: u64,
    /// Reconciliation overhead per epoch, indexed by epoch number.
    pub epoch_overhead: Vec<u64>,
    pub log: Option<Vec<String>>,
}

fn word_of(vaddr: u64) -> usize {
    ((vaddr >> 3) & 7) as usize
}

impl Machine {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let geom = cfg.geometry;
        let lpp = cfg.lines_per_page();
        let lat = cfg.latencies;
        let duon = cfg.policy.duon;
        Ok(Self {
            mem: PhysicalMemory::new(geom, lpp as usize, cfg.alloc.into(), cfg.seed),
            ept: ExtendedPageTable::new(),
            tlbs: (0..cfg.cores).map(|_| Tlb::new(cfg.tlb_entries)).collect(),
            caches: CacheHierarchy::new(cfg.cache, cfg.cores),
            controller: MigrationController::new(ControllerConfig {
                lines_per_page: lpp,
                line_bytes: cfg.cache.line_size,
                queue_capacity: cfg.migration.queue_capacity,
                blocking: cfg.migration.blocking,
            }),
            policy: Policy::new(cfg.policy),
            remap: (!duon).then(|| RemapTable::new(cfg.baseline.remap_capacity)),
            tcm: TlbCoherence::new(cfg.tcm),
            recency: Recency::default(),
            swap: FxHashMap::default(),
            cores: vec![CoreState::default(); cfg.cores],
            stats: MachineStats::default(),
            xfer: TransferLatencies {
                fast_read: lat.fast_read,
                fast_write: lat.fast_write,
                slow_read: lat.slow_read,
                slow_write: lat.slow_write,
                buffer_access: lat.buffer_access,
            },
            reconcile_pending: false,
            last_retire: 0,
            epoch_cycles: cfg.epoch_cycles(),
            epoch_overhead: Vec::new(),
            log: None,
            geom,
            lpp,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &MemoryGeometry {
        &self.geom
    }

    pub fn lines_per_page(&self) -> u32 {
        self.lpp
    }

    pub fn duon(&self) -> bool {
        self.remap.is_none()
    }

    pub fn vpn_of_addr(&self, vaddr: u64) -> VirtualPageId {
        VirtualPageId(vaddr >> self.geom.page_shift())
    }

    fn line_of_addr(&self, vaddr: u64) -> u32 {
        ((vaddr & (self.geom.page_size - 1)) >> 6) as u32
    }

    fn note(&mut self, f: impl FnOnce() -> String) {
        if let Some(log) = self.log.as_mut() {
            log.push(f());
        }
    }

    pub fn last_access(&self, ua: UnifiedPageId) -> u64 {
        self.recency.get(ua.0).unwrap_or(0)
    }

    /// The frame the system's own indirection names for `ua`: the extended
    /// page table in Duon mode, the remap table in the baseline.
    pub fn indirect_frame(&self, ua: UnifiedPageId) -> PhysicalFrame {
        let default = || default_frame_of(ua, &self.geom).expect("ua in range");
        match &self.remap {
            Some(r) => r.lookup(ua).unwrap_or_else(default),
            None => match self.ept.entry_by_ua(ua) {
                Some(e) if e.migrated => e.ra.expect("migrated entries carry an ra"),
                _ => default(),
            },
        }
    }

    fn checked_frame(&self, ua: UnifiedPageId, named: PhysicalFrame) -> Result<PhysicalFrame, SimError> {
        let truth = self.mem.frame_of(ua);
        if truth != named {
            return Err(SimError::Invariant(format!(
                "UA {} resolves to {named} but its data is at {truth}",
                ua.0
            )));
        }
        Ok(named)
    }

    // -----------------------------------------------------------------------
    // Scripted setup

    /// Maps `vpn` at a chosen unified page.
    pub fn map_page(&mut self, vpn: VirtualPageId, ua: UnifiedPageId) -> Result<EptEntry, SimError> {
        if !self.geom.contains(ua) || !self.mem.allocate_at(ua) {
            return Err(SimError::Invariant(format!("UA {} is not free", ua.0)));
        }
        let e = self.fresh_entry(vpn, ua);
        self.ept.insert(e);
        self.recency.set(ua.0, 0);
        Ok(e)
    }

    fn fresh_entry(&self, vpn: VirtualPageId, ua: UnifiedPageId) -> EptEntry {
        let mut e = EptEntry::fresh(vpn, ua);
        if self.duon() && self.mem.is_remapped(ua) {
            // The UA's frame moved earlier (it was the free page of a one-way
            // move), so the new mapping inherits that frame as its RA.
            e.migrated = true;
            e.ra = Some(self.mem.frame_of(ua));
        }
        e
    }

    pub fn frame_line(&self, frame: PhysicalFrame, line: u32) -> LineData {
        self.mem.store.read(self.geom.frame_index(frame), line)
    }

    pub fn set_frame_line(&mut self, frame: PhysicalFrame, line: u32, data: LineData) {
        let idx = self.geom.frame_index(frame);
        self.mem.store.write(idx, line, data);
    }

    // -----------------------------------------------------------------------
    // Memory events

    /// Issues one trace event on `core` at its current clock. `write_value`
    /// is stored on writes.
    pub fn step_core(&mut self, core: usize, ev: &TraceEvent, write_value: u64) -> Result<AccessOutcome, SimError> {
        if core >= self.cores.len() {
            return Err(SimError::CoreOutOfRange {
                core,
                cores: self.cores.len(),
            });
        }
        let start = self.cores[core].clock;
        let mut led = self.cores[core].ledger;
        let mut t = start + ev.icount;
        led.issue += ev.icount;

        let vpn = self.vpn_of_addr(ev.vaddr);
        let line = self.line_of_addr(ev.vaddr);
        let word = word_of(ev.vaddr);

        // Translation: extended TLB, then a page walk, then a fault.
        let mut page_fault = false;
        let (entry, tlb_hit) = match self.tlbs[core].lookup(vpn) {
            TlbLookup::Hit(e) => (e, true),
            TlbLookup::Miss => {
                let walk = self.cfg.latencies.page_walk;
                t += walk;
                led.memory += walk;
                let e = match self.ept.lookup(vpn) {
                    Ok(e) => e,
                    Err(TranslationError::PageFault(_)) => {
                        page_fault = true;
                        let (e, cost) = self.handle_page_fault(vpn, t)?;
                        t += cost;
                        led.overhead += cost;
                        e
                    }
                    Err(e) => return Err(e.into()),
                };
                let te = TlbEntry::from(&e);
                self.tlbs[core].fill(te);
                (te, false)
            }
        };
        // Caches only ever see the UA.
        let ua = entry.ua;
        let tag = UaLine::new(ua, line, self.lpp);
        let CacheAccess { level, latency } = self.caches.access(core, tag);
        t += latency;
        led.cache += latency;

        let mut memory = None;
        let mut stall = 0;
        if level == CacheLevel::Miss {
            let ext = self.cfg.latencies.ext_lookup;
            t += ext;
            led.memory += ext;
            self.advance(t)?;
            let (data, side, cost, waited) = self.fetch_line(core, vpn, ua, line, ev.rw, t)?;
            t += waited;
            led.stall += waited;
            stall = waited;
            t += cost;
            led.memory += cost;
            memory = Some(side);
            if let Some(wb) = self.caches.fill(core, tag, data) {
                self.writeback(wb, t)?;
            }
        }

        let value = match ev.rw {
            Rw::Read => self.caches.read_word(tag, word),
            Rw::Write => {
                self.caches.write_word(tag, word, write_value);
                if let Some(e) = self.ept.get_mut(vpn) {
                    e.dirty = true;
                }
                write_value
            }
        };
        self.recency.set(ua.0, t);

        let c = &mut self.cores[core];
        c.clock = t;
        c.ledger = led;
        c.instructions += ev.icount;
        c.events += 1;

        if level == CacheLevel::Miss {
            let in_slow = self.mem.frame_of(ua).tier == Tier::Slow;
            if let Some(cand) = self.policy.record_access(ua, ev.rw, t, in_slow) {
                self.request_migration(cand.ua, t)?;
            }
        }

        Ok(AccessOutcome {
            vpn,
            ua,
            tlb_hit,
            page_fault,
            cache_tag: tag,
            level,
            memory,
            value,
            cycles: t - start,
            stall,
        })
    }

    /// Resolves an LLC miss to its memory side and fetches the line.
    /// Returns (data, side, access cycles, stall cycles).
    fn fetch_line(
        &mut self,
        core: usize,
        vpn: VirtualPageId,
        ua: UnifiedPageId,
        line: u32,
        rw: Rw,
        t0: u64,
    ) -> Result<(LineData, MemorySide, u64, u64), SimError> {
        let mut t = t0;
        loop {
            if self.controller.owns(vpn) {
                let out = self
                    .controller
                    .intercept_access(core, vpn, line, rw, t, &self.geom, self.cfg.latencies.buffer_access)
                    .expect("owned page is intercepted");
                match out {
                    InterceptOutcome::ServedFromBuffer { which, latency } => {
                        let data = *self.controller.buffer(which).get(line).expect("buffer holds the line");
                        return Ok((data, MemorySide::Buffer(which), latency, t - t0));
                    }
                    InterceptOutcome::RedirectedToFrame(f) => {
                        let cost = self.frame_read_cost(f.tier, t);
                        return Ok((self.frame_line(f, line), MemorySide::Frame(f), cost, t - t0));
                    }
                    InterceptOutcome::Enqueued { ready_at } => {
                        let w = ready_at.saturating_sub(t);
                        self.stats.migration_stall_cycles += w;
                        t += w;
                        self.advance(t)?;
                    }
                }
            } else {
                let f = match &self.remap {
                    Some(r) => r
                        .lookup(ua)
                        .unwrap_or_else(|| default_frame_of(ua, &self.geom).expect("ua in range")),
                    None => {
                        // The TLB supplies the RA; the entry is current because
                        // completion broadcasts update every holder.
                        let e = *self.tlbs[core].peek(vpn).ok_or_else(|| {
                            SimError::Invariant(format!("TLB of core {core} lost vpn {:#x} mid-access", vpn.0))
                        })?;
                        match (e.migrated, e.ra) {
                            (true, Some(ra)) => ra,
                            _ => default_frame_of(ua, &self.geom)?,
                        }
                    }
                };
                let f = self.checked_frame(ua, f)?;
                let cost = self.frame_read_cost(f.tier, t);
                return Ok((self.frame_line(f, line), MemorySide::Frame(f), cost, t - t0));
            }
        }
    }

    fn frame_read_cost(&mut self, tier: Tier, t: u64) -> u64 {
        let base = match tier {
            Tier::Fast => self.cfg.latencies.fast_read,
            Tier::Slow => self.cfg.latencies.slow_read,
        };
        let extra = if self.cfg.migration.contention {
            self.controller.active().map_or(0, |j| j.contention(tier, t))
        } else {
            0
        };
        self.stats.contention_cycles += extra;
        base + extra
    }

    /// Writes an evicted dirty line back through the indirection.
    fn writeback(&mut self, wb: Writeback, t: u64) -> Result<(), SimError> {
        let ua = wb.line.page(self.lpp);
        let off = wb.line.offset(self.lpp);
        self.stats.memory_writebacks += 1;
        let vpn = self
            .ept
            .vpn_of(ua)
            .ok_or_else(|| SimError::Invariant(format!("cached line of unmapped UA {}", ua.0)))?;
        if self.controller.owns(vpn) {
            if let Some(Some(f)) = self.controller.intercept_writeback(vpn, off, wb.data, t, &self.geom) {
                self.set_frame_line(f, off, wb.data);
            }
            return Ok(());
        }
        let f = self.checked_frame(ua, self.indirect_frame(ua))?;
        self.set_frame_line(f, off, wb.data);
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Page faults

    /// Maps `vpn`, evicting the least recently used resident page when no
    /// unified page is free. Returns the new entry and the cycles charged.
    pub fn handle_page_fault(&mut self, vpn: VirtualPageId, t: u64) -> Result<(EptEntry, u64), SimError> {
        if let Some(e) = self.ept.get(vpn) {
            return Ok((*e, 0));
        }
        let ua = match self.mem.allocate() {
            Some(ua) => ua,
            None => self.evict_for_fault(t)?,
        };
        let e = self.fresh_entry(vpn, ua);
        self.ept.insert(e);
        let idx = self.mem.frame_index_of(ua);
        let data = self.swap.remove(&vpn.0).flatten();
        self.mem.store.write_page(idx, data);
        self.recency.set(ua.0, t);
        self.stats.page_faults += 1;
        let vpn_hex = vpn.0;
        self.note(|| format!("fault,{t},{vpn_hex:#x},{}", ua.0));
        Ok((e, self.cfg.latencies.page_fault))
    }

    fn evict_for_fault(&mut self, t: u64) -> Result<UnifiedPageId, SimError> {
        let victim = self
            .recency
            .oldest_first()
            .filter_map(|ua| self.ept.vpn_of(ua))
            .find(|&vpn| !self.controller.owns(vpn))
            .ok_or(TranslationError::Capacity)?;
        let ua = self.ept.get(victim).expect("victim is mapped").ua;
        for tlb in &mut self.tlbs {
            if tlb.invalidate(victim) {
                self.stats.page_fault_tlb_invalidations += 1;
            }
        }
        let (n, wbs) = self.caches.invalidate_page_lines(ua, self.lpp);
        self.stats.page_fault_lines_invalidated += n;
        for wb in wbs {
            self.writeback(wb, t)?;
        }
        let idx = self.mem.frame_index_of(ua);
        self.swap.insert(victim.0, self.mem.store.read_page(idx));
        self.ept.remove(victim);
        self.policy.forget(ua);
        self.recency.remove(ua.0);
        self.stats.page_fault_evictions += 1;
        Ok(ua)
    }

    // -----------------------------------------------------------------------
    // Migration

    /// Submits a hot page for migration into the fast tier.
    pub fn request_migration(&mut self, hot_ua: UnifiedPageId, t: u64) -> Result<RequestOutcome, SimError> {
        let Some(vpn) = self.ept.vpn_of(hot_ua) else {
            self.stats.rejected_not_resident += 1;
            return Ok(RequestOutcome::Rejected(RejectReason::NotResident));
        };
        if self.controller.owns(vpn) {
            self.stats.rejected_in_flight += 1;
            return Ok(RequestOutcome::Rejected(RejectReason::InFlight));
        }
        if self.mem.frame_of(hot_ua).tier == Tier::Fast {
            self.stats.rejected_already_fast += 1;
            return Ok(RequestOutcome::Rejected(RejectReason::AlreadyFast));
        }
        if self.controller.is_busy() || self.reconcile_pending {
            return Ok(self.controller.enqueue(vpn));
        }
        if self.remap.as_ref().is_some_and(|r| r.would_overflow(2)) {
            // The table has no room for this job's entries: reconcile at the
            // next event boundary, then admit.
            self.reconcile_pending = true;
            return Ok(self.controller.enqueue(vpn));
        }
        self.start_job(vpn, None, t)
    }

    /// Starts a job now. With `victim` given the job is a pair swap with that
    /// page; otherwise a free fast frame is used if one exists, else the
    /// least recently used fast-tier page is displaced.
    pub fn start_job(
        &mut self,
        hot_vpn: VirtualPageId,
        victim: Option<VirtualPageId>,
        t: u64,
    ) -> Result<RequestOutcome, SimError> {
        if self.controller.is_busy() {
            return Err(SimError::Invariant("a migration job is already active".into()));
        }
        let hot_entry = *self.ept.get(hot_vpn).ok_or(TranslationError::PageFault(hot_vpn.0))?;
        let hot_ua = hot_entry.ua;
        let hot_from = self.mem.frame_of(hot_ua);

        let (victim, free_ua) = match victim {
            Some(v) => (Some(v), None),
            None => match self.mem.free_fast_owner() {
                Some(free) => (None, Some(free)),
                None => {
                    let v = self.pick_victim();
                    if v.is_none() {
                        self.stats.rejected_not_resident += 1;
                        return Ok(RequestOutcome::Rejected(RejectReason::NotResident));
                    }
                    (v, None)
                }
            },
        };

        let plan = match (victim, free_ua) {
            (Some(v), _) => {
                let ve = *self.ept.get(v).ok_or(TranslationError::PageFault(v.0))?;
                let v_from = self.mem.frame_of(ve.ua);
                JobPlan {
                    hot: PageMove {
                        vpn: hot_vpn,
                        ua: hot_ua,
                        from: hot_from,
                        to: v_from,
                    },
                    victim: Some(PageMove {
                        vpn: v,
                        ua: ve.ua,
                        from: v_from,
                        to: hot_from,
                    }),
                    free_ua: None,
                }
            }
            (None, Some(free)) => {
                // Reserve the free page so a fault cannot claim its frame.
                self.mem.allocate_at(free);
                JobPlan {
                    hot: PageMove {
                        vpn: hot_vpn,
                        ua: hot_ua,
                        from: hot_from,
                        to: self.mem.frame_of(free),
                    },
                    victim: None,
                    free_ua: Some(free),
                }
            }
            (None, None) => unreachable!(),
        };

        let (start_lat, complete_lat) = if self.duon() {
            let flagged = match plan.victim {
                // Pair swap: the displaced page is flagged and staged in the
                // hot buffer; the incoming page keeps its flags clear.
                Some(v) => self.ept.mark_migration_start(v.vpn, true, true)?,
                // One-way: the incoming page is flagged, staged in the cold buffer.
                None => self.ept.mark_migration_start(hot_vpn, false, false)?,
            };
            let b = self.tcm.broadcast(&flagged, &mut self.tlbs);
            (b.latency, self.tcm.latency(self.tlbs.len()))
        } else {
            (0, 0)
        };

        let job = self.controller.start(plan, t, t + start_lat, complete_lat, &self.xfer);
        let id = job.id;
        self.stats.migrations_started += 1;
        if plan.victim.is_some() {
            self.stats.pair_migrations += 1;
        }
        self.note(|| {
            format!(
                "migrate,{t},{id},{:#x},{},{},{}",
                hot_vpn.0,
                plan.hot.from,
                plan.hot.to,
                plan.victim.map_or("-".to_string(), |v| format!("{:#x}", v.vpn.0))
            )
        });
        Ok(RequestOutcome::Started(id))
    }

    fn pick_victim(&self) -> Option<VirtualPageId> {
        self.recency
            .oldest_first()
            .filter(|&ua| self.mem.frame_of(ua).tier == Tier::Fast)
            .filter_map(|ua| self.ept.vpn_of(ua))
            .find(|&vpn| !self.controller.owns(vpn))
    }

    /// Runs the active job (and queued ones) forward to cycle `t`.
    pub fn advance(&mut self, t: u64) -> Result<(), SimError> {
        loop {
            if self.controller.is_busy() {
                let geom = self.geom;
                let events = self.controller.tick(t, &mut self.mem.store, |f| geom.frame_index(f));
                for ev in events {
                    match ev {
                        SimEvent::DataPlaced { .. } => self.on_data_placed()?,
                        SimEvent::Retired { .. } => self.on_retired()?,
                        _ => {}
                    }
                }
                if self.controller.is_busy() {
                    return Ok(());
                }
            }
            if self.reconcile_pending {
                return Ok(());
            }
            let Some(vpn) = self.controller.next_queued() else {
                return Ok(());
            };
            let Some(ua) = self.ept.get(vpn).map(|e| e.ua) else {
                self.stats.rejected_not_resident += 1;
                continue;
            };
            let at = self.last_retire.min(t);
            if let RequestOutcome::Queued = self.request_migration(ua, at)? {
                // Only possible when the remap table forced a reconcile.
                return Ok(());
            }
        }
    }

    fn on_data_placed(&mut self) -> Result<(), SimError> {
        let job = self.controller.active().expect("data placed for an active job");
        let (hot, victim, free) = (job.hot, job.victim, job.free_ua);
        match (victim, free) {
            (Some(v), _) => self.mem.swap_frames(hot.ua, v.ua),
            (None, Some(f)) => self.mem.swap_frames(hot.ua, f),
            (None, None) => unreachable!("one-way jobs carry a free page"),
        }
        match self.remap.as_mut() {
            None => {
                self.ept.set_remapped(hot.vpn, hot.to)?;
                if let Some(v) = victim {
                    self.ept.set_remapped(v.vpn, v.to)?;
                }
            }
            Some(r) => {
                let geom = self.geom;
                let at_default = |ua, f| default_frame_of(ua, &geom).expect("ua in range") == f;
                r.record(hot.ua, hot.to, at_default(hot.ua, hot.to));
                if let Some(v) = victim {
                    r.record(v.ua, v.to, at_default(v.ua, v.to));
                }
                if let Some(f) = free {
                    r.record(f, hot.from, at_default(f, hot.from));
                }
            }
        }
        Ok(())
    }

    fn on_retired(&mut self) -> Result<(), SimError> {
        let job: MigrationJob = self.controller.retire();
        if self.duon() {
            let mut done = Vec::with_capacity(2);
            match job.victim {
                Some(v) => {
                    done.push(self.ept.mark_migration_complete(v.vpn, v.to, true)?);
                    done.push(self.ept.complete_pair_incoming(job.hot.vpn, job.hot.to)?);
                }
                None => done.push(self.ept.mark_migration_complete(job.hot.vpn, job.hot.to, false)?),
            }
            for e in &done {
                self.tcm.broadcast(e, &mut self.tlbs);
                self.check_coherence(e)?;
            }
        }
        if let Some(f) = job.free_ua {
            self.mem.release(f);
        }
        self.policy.reset_page(job.hot.ua);
        if let Some(v) = job.victim {
            self.policy.reset_page(v.ua);
        }
        self.stats.migrations_completed += 1;
        self.last_retire = job.retire_cycle;
        if self.remap.as_ref().is_some_and(|r| r.reconcile_due()) {
            self.reconcile_pending = true;
        }
        let (id, rc) = (job.id, job.retire_cycle);
        self.note(|| format!("retire,{rc},{id}"));
        Ok(())
    }

    /// After a completion broadcast: no TLB still shows the page in flight,
    /// every holder carries the page table's translation, and that
    /// translation names the frame actually holding the data.
    fn check_coherence(&mut self, e: &EptEntry) -> Result<(), SimError> {
        self.stats.coherence_checks += 1;
        let stale = self
            .tlbs
            .iter()
            .any(|t| t.peek(e.vpn).is_some_and(|x| x.ongoing_migration));
        if stale || !tlbs_agree(e, &self.tlbs) {
            return Err(SimError::Invariant(format!(
                "TLBs disagree on vpn {:#x} after completion broadcast",
                e.vpn.0
            )));
        }
        let named = if e.migrated {
            e.ra.expect("migrated entries carry an ra")
        } else {
            default_frame_of(e.ua, &self.geom)?
        };
        self.checked_frame(e.ua, named)?;
        Ok(())
    }

    pub fn reconcile_pending(&self) -> bool {
        self.reconcile_pending
    }

    /// Per-event housekeeping at global time `t`: job progress and any
    /// reconciliation the baseline has scheduled.
    pub fn begin_event(&mut self, t: u64) -> Result<(), SimError> {
        self.advance(t)?;
        if self.reconcile_pending && !self.controller.is_busy() {
            self.reconcile(t)?;
            self.advance(t)?;
        }
        Ok(())
    }

    /// Baseline address reconciliation: every page off its canonical frame
    /// is shot down in all TLBs and purged from the caches, then the
    /// canonical mapping is rewritten so each page's UA names its frame.
    pub fn reconcile(&mut self, t: u64) -> Result<ReconcileReport, SimError> {
        let Some(remap) = self.remap.as_ref() else {
            return Err(SimError::Invariant("reconciliation requested in Duon mode".into()));
        };
        if self.controller.is_busy() {
            return Err(SimError::Invariant("reconciliation with a migration in flight".into()));
        }
        if remap.occupancy() != self.mem.remapped_count() {
            return Err(SimError::Invariant(format!(
                "remap table holds {} pages but {} are off their frames",
                remap.occupancy(),
                self.mem.remapped_count()
            )));
        }
        let entries = remap.entries();
        let mut rep = ReconcileReport::default();
        let mut charged_lines = 0;
        for (ua, _) in &entries {
            if let Some(vpn) = self.ept.vpn_of(*ua) {
                rep.shootdown_events += 1;
                rep.tlb_shootdowns += self.tcm.shootdown(vpn, &mut self.tlbs) as u64;
            }
            let (n, wbs) = self.caches.invalidate_page_lines(*ua, self.lpp);
            rep.lines_invalidated += n;
            rep.lines_written_back += wbs.len() as u64;
            charged_lines += if self.cfg.baseline.charge_absent_lines {
                u64::from(self.lpp)
            } else {
                n
            };
            for wb in wbs {
                self.writeback(wb, t)?;
            }
        }
        let moves = self.mem.canonicalize();
        let relabels: Vec<(VirtualPageId, UnifiedPageId)> = moves
            .iter()
            .filter_map(|(old, new)| self.ept.vpn_of(*old).map(|v| (v, *new)))
            .collect();
        for (vpn, new) in relabels {
            self.ept.relabel(vpn, new);
        }
        self.policy.relabel(&moves);
        self.recency.relabel(&moves);
        let remap = self.remap.as_mut().expect("checked above");
        remap.clear();

        let sd = rep.shootdown_events * self.cfg.baseline.shootdown_cost;
        let inv = charged_lines * self.cfg.baseline.line_invalidate_cost;
        rep.overhead_cycles = sd + inv;
        for c in &mut self.cores {
            c.clock += rep.overhead_cycles;
            c.ledger.overhead += rep.overhead_cycles;
        }
        let epoch = (t / self.epoch_cycles) as usize;
        if self.epoch_overhead.len() <= epoch {
            self.epoch_overhead.resize(epoch + 1, 0);
        }
        self.epoch_overhead[epoch] += rep.overhead_cycles;

        let s = &mut self.stats;
        s.reconciliations += 1;
        s.shootdown_cycles += sd;
        s.invalidation_cycles += inv;
        s.reconcile.shootdown_events += rep.shootdown_events;
        s.reconcile.tlb_shootdowns += rep.tlb_shootdowns;
        s.reconcile.lines_invalidated += rep.lines_invalidated;
        s.reconcile.lines_written_back += rep.lines_written_back;
        s.reconcile.overhead_cycles += rep.overhead_cycles;
        self.reconcile_pending = false;
        let n = entries.len();
        self.note(|| format!("reconcile,{t},{n},{}", rep.overhead_cycles));
        Ok(rep)
    }

    /// Epoch boundary at cycle `t`: batch candidates go to the controller.
    pub fn epoch_boundary(&mut self, t: u64) -> Result<(), SimError> {
        if self.policy.config.kind != PolicyKind::Epoch {
            return Ok(());
        }
        let cands = {
            let mem = &self.mem;
            let ept = &self.ept;
            self.policy
                .epoch_boundary(|ua| ept.vpn_of(ua).is_some() && mem.frame_of(ua).tier == Tier::Slow)
        };
        for c in cands {
            self.request_migration(c.ua, t)?;
        }
        Ok(())
    }

    /// Runs the active job to retirement without admitting queued ones.
    /// Returns the number of queued candidates left unstarted.
    pub fn finish_migrations(&mut self) -> Result<usize, SimError> {
        let mut dropped = 0;
        while let Some(vpn) = self.controller.next_queued() {
            let _ = vpn;
            dropped += 1;
        }
        if let Some(rc) = self.controller.active().map(|j| j.retire_cycle) {
            self.advance(rc)?;
        }
        debug_assert!(!self.controller.is_busy());
        Ok(dropped)
    }

    /// Writes every dirty cached line back to memory.
    pub fn flush_caches(&mut self, t: u64) -> Result<(), SimError> {
        for wb in self.caches.flush() {
            self.writeback(wb, t)?;
        }
        Ok(())
    }

    /// Reads one word of a virtual address straight from memory (mapped
    /// pages) or from swap (evicted pages). Call after flushing the caches.
    pub fn memory_word(&self, vaddr: u64) -> u64 {
        let vpn = self.vpn_of_addr(vaddr);
        let line = self.line_of_addr(vaddr);
        let word = word_of(vaddr);
        match self.ept.get(vpn) {
            Some(e) => self.mem.store.read(self.mem.frame_index_of(e.ua), line)[word],
            None => match self.swap.get(&vpn.0) {
                Some(Some(p)) => p[line as usize][word],
                _ => 0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheConfig;
    use crate::coherence::TcmConfig;
    use crate::config::{AllocKind, BaselineConfig, LatencyTable, MigrationConfig};
    use crate::policy::PolicyConfig;

    fn cfg(duon: bool) -> SimConfig {
        SimConfig {
            cores: 2,
            core_freq_ghz: 3.2,
            geometry: MemoryGeometry::new(4 * 4096, 8 * 4096, 4096).unwrap(),
            cache: CacheConfig {
                l1_size: 1024,
                l1_assoc: 2,
                l1_latency: 2,
                llc_size: 4096,
                llc_assoc: 4,
                llc_latency: 21,
                line_size: 64,
            },
            policy: PolicyConfig {
                kind: PolicyKind::Threshold,
                threshold: 4,
                duon,
                ..PolicyConfig::default()
            },
            latencies: LatencyTable::default(),
            seed: 1,
            tlb_entries: 8,
            alloc: AllocKind::Sequential,
            tcm: TcmConfig::default(),
            baseline: BaselineConfig {
                remap_capacity: 4,
                ..BaselineConfig::default()
            },
            migration: MigrationConfig::default(),
        }
    }

    fn ev(core: u32, rw: Rw, vaddr: u64) -> TraceEvent {
        TraceEvent {
            core,
            rw,
            vaddr,
            icount: 1,
        }
    }

    #[test]
    fn first_touch_faults_then_hits() {
        let mut m = Machine::new(&cfg(true)).unwrap();
        let a = m.step_core(0, &ev(0, Rw::Write, 0x5008), 77).unwrap();
        assert!(a.page_fault && !a.tlb_hit);
        assert_eq!(a.level, CacheLevel::Miss);
        let b = m.step_core(0, &ev(0, Rw::Read, 0x5008), 0).unwrap();
        assert!(b.tlb_hit && !b.page_fault);
        assert_eq!(b.level, CacheLevel::L1Hit);
        assert_eq!(b.value, 77);
        assert_eq!(b.cycles, 1 + 2);
        assert_eq!(m.stats.page_faults, 1);
        assert_eq!(m.cores[0].ledger.total(), m.cores[0].clock);
    }

    #[test]
    fn full_memory_evicts_lru_and_restores_from_swap() {
        let mut m = Machine::new(&cfg(true)).unwrap();
        let total = m.geometry().total_pages();
        for p in 0..total {
            m.step_core(0, &ev(0, Rw::Write, p << 12), p + 100).unwrap();
        }
        assert_eq!(m.mem.allocated_count(), total);
        // One more page: evicts page 0 (least recently used).
        m.step_core(0, &ev(0, Rw::Read, total << 12), 0).unwrap();
        assert_eq!(m.stats.page_fault_evictions, 1);
        assert!(m.ept.get(VirtualPageId(0)).is_none());
        assert_eq!(m.ept.len() as u64, total);
        let back = m.step_core(0, &ev(0, Rw::Read, 0), 0).unwrap();
        assert!(back.page_fault);
        assert_eq!(back.value, 100);
    }
}
