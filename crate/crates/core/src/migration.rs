//! The migration controller: hot/cold transfer buffers, per-line bit vectors,
//! the wait queue and per-tier migration queues, and the step machine that
//! moves one page (one-way) or swaps two pages (pair).
//!
//! Step timeline of a pair swap between a victim `V` (fast frame `Fv`) and a
//! hot page `H` (slow frame `Fh`):
//!
//! * S2: every line of `V` is copied `Fv` -> hot buffer.
//! * S3: every line of `H` is read `Fh` -> cold buffer and written to `Fv`.
//! * S4: the hot buffer drains into `Fh`.
//! * S5: both mappings complete.
//!
//! A one-way move into a free fast frame runs S3 only. Line transfers within
//! a step are pipelined: line `i` lands `src + dst + i * max(src, dst)`
//! cycles after the step starts.

use std::collections::VecDeque;

use crate::address_space::{PhysicalFrame, Tier, UnifiedPageId, VirtualPageId};
use crate::memory::{FrameStore, LineData, WORDS_PER_LINE};
use crate::translation::{resolve_memory_target, BufferKind, InFlight, MemoryTarget};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitVector {
    words: Vec<u64>,
    len: u32,
}

impl BitVector {
    pub fn new(len: u32) -> Self {
        Self {
            words: vec![0; (len as usize).div_ceil(64)],
            len,
        }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: u32) -> bool {
        self.words[(i / 64) as usize] & (1 << (i % 64)) != 0
    }

    /// Bits only ever go 0 -> 1 within a job.
    pub fn set(&mut self, i: u32) {
        assert!(i < self.len);
        self.words[(i / 64) as usize] |= 1 << (i % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn reset(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }
}

#[derive(Debug, Clone)]
pub struct TransferBuffer {
    pub which: BufferKind,
    pub capacity_bytes: u64,
    pub owner: Option<VirtualPageId>,
    lines: Vec<Option<LineData>>,
}

impl TransferBuffer {
    pub fn new(which: BufferKind, lines_per_page: u32, line_bytes: u64) -> Self {
        Self {
            which,
            capacity_bytes: u64::from(lines_per_page) * line_bytes,
            owner: None,
            lines: vec![None; lines_per_page as usize],
        }
    }

    pub fn holds(&self, line: u32) -> bool {
        self.lines[line as usize].is_some()
    }

    pub fn held_lines(&self) -> usize {
        self.lines.iter().filter(|l| l.is_some()).count()
    }

    pub fn get(&self, line: u32) -> Option<&LineData> {
        self.lines[line as usize].as_ref()
    }

    pub fn get_mut(&mut self, line: u32) -> Option<&mut LineData> {
        self.lines[line as usize].as_mut()
    }

    fn load(&mut self, owner: VirtualPageId, line: u32, data: LineData) {
        assert!(
            self.owner.is_none() || self.owner == Some(owner),
            "buffer shared by two pages"
        );
        self.owner = Some(owner);
        self.lines[line as usize] = Some(data);
    }

    fn take(&mut self, line: u32) -> LineData {
        self.lines[line as usize]
            .take()
            .expect("draining a line the buffer does not hold")
    }

    fn release(&mut self) {
        debug_assert_eq!(self.held_lines(), 0);
        self.owner = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rw {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaitEntry {
    pub core: Option<usize>,
    pub vpn: VirtualPageId,
    pub line: u32,
    pub rw: Rw,
    pub enqueue_cycle: u64,
    /// Writeback payload (full line); demand requests carry none.
    pub data: Option<LineData>,
}

#[derive(Debug, Clone, Default)]
pub struct WaitQueue {
    pending: VecDeque<WaitEntry>,
    pub served: u64,
    pub max_depth: usize,
}

impl WaitQueue {
    pub fn push(&mut self, e: WaitEntry) {
        self.pending.push_back(e);
        self.max_depth = self.max_depth.max(self.pending.len());
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending_for(&self, vpn: VirtualPageId) -> usize {
        self.pending.iter().filter(|e| e.vpn == vpn).count()
    }

    /// Removes and returns, in arrival order, every entry for this line.
    fn drain_line(&mut self, vpn: VirtualPageId, line: u32) -> Vec<WaitEntry> {
        let mut out = Vec::new();
        self.pending.retain(|e| {
            if e.vpn == vpn && e.line == line {
                out.push(e.clone());
                false
            } else {
                true
            }
        });
        self.served += out.len() as u64;
        out
    }
}

/// Controller-issued line reads, FIFO per tier.
#[derive(Debug, Clone, Default)]
pub struct MigrationQueue {
    pub tier: Option<Tier>,
    reads: VecDeque<(VirtualPageId, u32, u64)>,
    pub issued: u64,
    pub max_depth: usize,
}

impl MigrationQueue {
    fn issue(&mut self, vpn: VirtualPageId, line: u32, done_at: u64) {
        self.reads.push_back((vpn, line, done_at));
        self.issued += 1;
        self.max_depth = self.max_depth.max(self.reads.len());
    }

    fn retire_until(&mut self, now: u64) {
        while self.reads.front().is_some_and(|r| r.2 <= now) {
            self.reads.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.reads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    S1Decide,
    S2VictimToHotBuffer,
    S3HotPageToFast,
    S4BufferToSlow,
    S5Complete,
}

/// One page's move: it leaves `from` and ends up backed by `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageMove {
    pub vpn: VirtualPageId,
    pub ua: UnifiedPageId,
    pub from: PhysicalFrame,
    pub to: PhysicalFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferLatencies {
    pub fast_read: u64,
    pub fast_write: u64,
    pub slow_read: u64,
    pub slow_write: u64,
    pub buffer_access: u64,
}

impl TransferLatencies {
    fn read(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Fast => self.fast_read,
            Tier::Slow => self.slow_read,
        }
    }
    fn write(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Fast => self.fast_write,
            Tier::Slow => self.slow_write,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TransferKind {
    /// victim line lands in the hot buffer
    S2Land,
    /// incoming line read into the cold buffer
    S3Read,
    /// incoming line written into its new frame
    S3Land,
    /// victim line drained into its new frame
    S4Land,
    StepDone(Step),
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    at: u64,
    kind: TransferKind,
    line: u32,
}

#[derive(Debug, Clone, Copy)]
struct StepWindow {
    start: u64,
    end: u64,
    /// service slot of one line transfer
    slot: u64,
}

#[derive(Debug, Clone)]
pub struct MigrationJob {
    pub id: u64,
    pub hot: PageMove,
    pub victim: Option<PageMove>,
    /// One-way moves take the fast frame of this unallocated UA.
    pub free_ua: Option<UnifiedPageId>,
    pub step: Step,
    pub bitvec_in: BitVector,
    pub bitvec_out: BitVector,
    pub request_cycle: u64,
    pub start_cycle: u64,
    pub lines_per_page: u32,
    /// Whether the incoming page carries ongoing = 1 (one-way moves).
    pub incoming_flagged: bool,
    schedule: Vec<Transfer>,
    cursor: usize,
    s2_land: Vec<u64>,
    s3_read: Vec<u64>,
    windows: [Option<StepWindow>; 3],
    transfers_done: u64,
    pub retire_cycle: u64,
    pub stalled_requests: u64,
    pub buffer_served: u64,
    pub redirected: u64,
}

impl MigrationJob {
    pub fn is_pair(&self) -> bool {
        self.victim.is_some()
    }

    pub fn involves(&self, vpn: VirtualPageId) -> bool {
        self.hot.vpn == vpn || self.victim.is_some_and(|v| v.vpn == vpn)
    }

    /// Cycle at which `step` finishes (S2..S4), or retirement for S5.
    pub fn step_end(&self, step: Step) -> u64 {
        match step {
            Step::S1Decide => self.start_cycle,
            Step::S2VictimToHotBuffer => self.windows[0].map_or(self.start_cycle, |w| w.end),
            Step::S3HotPageToFast => self.windows[1].map_or(self.start_cycle, |w| w.end),
            Step::S4BufferToSlow => self.windows[2].map_or(self.step_end(Step::S3HotPageToFast), |w| w.end),
            Step::S5Complete => self.retire_cycle,
        }
    }

    /// Line transfers performed so far (S2 + S3 + S4).
    pub fn transfers_done(&self) -> u64 {
        self.transfers_done
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == self.schedule.len()
    }

    /// Extra wait a demand access to `tier` sees at `now` while this job's
    /// transfers occupy that device: the mean residual of one transfer slot.
    pub fn contention(&self, tier: Tier, now: u64) -> u64 {
        let uses = |step: usize| match step {
            0 => tier == Tier::Fast,
            1 => true,
            _ => tier == Tier::Slow,
        };
        self.windows
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.map(|w| (i, w)))
            .find(|(i, w)| uses(*i) && w.start <= now && now < w.end)
            .map_or(0, |(_, w)| w.slot / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobPlan {
    pub hot: PageMove,
    pub victim: Option<PageMove>,
    pub free_ua: Option<UnifiedPageId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    StepReached {
        job: u64,
        step: Step,
    },
    /// All data is at its destination; remapped addresses may be published.
    DataPlaced {
        job: u64,
    },
    Retired {
        job: u64,
    },
    /// A stalled request became serviceable.
    WaitServed {
        job: u64,
        entry: WaitEntry,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterceptOutcome {
    ServedFromBuffer { which: BufferKind, latency: u64 },
    RedirectedToFrame(PhysicalFrame),
    Enqueued { ready_at: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    AlreadyFast,
    InFlight,
    QueueFull,
    NotResident,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOutcome {
    Started(u64),
    Queued,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobRecord {
    pub hot_vpn: VirtualPageId,
    pub victim_vpn: Option<VirtualPageId>,
    pub pair: bool,
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub stalled_requests: u64,
    pub buffer_served: u64,
    pub redirected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControllerConfig {
    pub lines_per_page: u32,
    pub line_bytes: u64,
    pub queue_capacity: usize,
    /// Every access to an in-flight page waits for retirement.
    pub blocking: bool,
}

/// Where a line of an in-flight page can be found right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineLocation {
    Frame(PhysicalFrame),
    Buffer(BufferKind),
    Pending { ready_at: u64 },
}

#[derive(Debug, Clone)]
pub struct MigrationController {
    pub config: ControllerConfig,
    pub hot_buffer: TransferBuffer,
    pub cold_buffer: TransferBuffer,
    pub wait_queue: WaitQueue,
    pub migration_queues: [MigrationQueue; 2],
    active: Option<MigrationJob>,
    pending: VecDeque<VirtualPageId>,
    next_id: u64,
    pub dropped_candidates: u64,
    pub records: Vec<JobRecord>,
}

impl MigrationController {
    pub fn new(config: ControllerConfig) -> Self {
        let lpp = config.lines_per_page;
        Self {
            hot_buffer: TransferBuffer::new(BufferKind::Hot, lpp, config.line_bytes),
            cold_buffer: TransferBuffer::new(BufferKind::Cold, lpp, config.line_bytes),
            wait_queue: WaitQueue::default(),
            migration_queues: [
                MigrationQueue {
                    tier: Some(Tier::Fast),
                    ..Default::default()
                },
                MigrationQueue {
                    tier: Some(Tier::Slow),
                    ..Default::default()
                },
            ],
            active: None,
            pending: VecDeque::new(),
            next_id: 0,
            dropped_candidates: 0,
            records: Vec::new(),
            config,
        }
    }

    pub fn active(&self) -> Option<&MigrationJob> {
        self.active.as_ref()
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some()
    }

    pub fn owns(&self, vpn: VirtualPageId) -> bool {
        self.active.as_ref().is_some_and(|j| j.involves(vpn))
    }

    pub fn queued(&self) -> impl Iterator<Item = &VirtualPageId> {
        self.pending.iter()
    }

    pub fn is_queued(&self, vpn: VirtualPageId) -> bool {
        self.pending.contains(&vpn)
    }

    /// FIFO admission queue for candidates arriving while a job runs.
    pub fn enqueue(&mut self, vpn: VirtualPageId) -> RequestOutcome {
        if self.pending.contains(&vpn) {
            return RequestOutcome::Queued;
        }
        if self.pending.len() >= self.config.queue_capacity {
            self.dropped_candidates += 1;
            return RequestOutcome::Rejected(RejectReason::QueueFull);
        }
        self.pending.push_back(vpn);
        RequestOutcome::Queued
    }

    pub fn next_queued(&mut self) -> Option<VirtualPageId> {
        self.pending.pop_front()
    }

    /// Starts a job whose transfers begin at `start` (after any start
    /// broadcast) and which retires `complete_latency` cycles after the last
    /// transfer. `incoming_flagged` records whether the incoming page carries
    /// ongoing = 1 (one-way moves) so stalls follow the flag.
    pub fn start(
        &mut self,
        plan: JobPlan,
        request_cycle: u64,
        start: u64,
        complete_latency: u64,
        lat: &TransferLatencies,
    ) -> &MigrationJob {
        assert!(self.active.is_none(), "one active migration at a time");
        let lpp = self.config.lines_per_page;
        let mut schedule = Vec::with_capacity(lpp as usize * 4 + 4);
        let mut s2_land = vec![start; lpp as usize];
        let mut s3_read = vec![start; lpp as usize];
        let mut windows = [None; 3];
        let mut t = start;

        let stream = |t0: u64,
                      src: u64,
                      dst: u64,
                      kinds: (Option<TransferKind>, TransferKind),
                      out: &mut Vec<Transfer>,
                      times: Option<&mut Vec<u64>>| {
            let slot = src.max(dst);
            let mut times = times;
            let mut end = t0;
            for i in 0..lpp {
                let read = t0 + src + u64::from(i) * slot;
                let land = read + dst;
                if let Some(k) = kinds.0 {
                    out.push(Transfer {
                        at: read,
                        kind: k,
                        line: i,
                    });
                }
                out.push(Transfer {
                    at: land,
                    kind: kinds.1,
                    line: i,
                });
                if let Some(ts) = times.as_deref_mut() {
                    ts[i as usize] = if kinds.0.is_some() { read } else { land };
                }
                end = land;
            }
            StepWindow { start: t0, end, slot }
        };

        if let Some(v) = plan.victim {
            let w = stream(
                t,
                lat.read(v.from.tier),
                lat.buffer_access,
                (None, TransferKind::S2Land),
                &mut schedule,
                Some(&mut s2_land),
            );
            windows[0] = Some(w);
            t = w.end;
        }
        schedule.push(Transfer {
            at: t,
            kind: TransferKind::StepDone(Step::S2VictimToHotBuffer),
            line: 0,
        });
        let w = stream(
            t,
            lat.read(plan.hot.from.tier),
            lat.write(plan.hot.to.tier),
            (Some(TransferKind::S3Read), TransferKind::S3Land),
            &mut schedule,
            Some(&mut s3_read),
        );
        windows[1] = Some(w);
        t = w.end;
        schedule.push(Transfer {
            at: t,
            kind: TransferKind::StepDone(Step::S3HotPageToFast),
            line: 0,
        });
        if let Some(v) = plan.victim {
            let w = stream(
                t,
                lat.buffer_access,
                lat.write(v.to.tier),
                (None, TransferKind::S4Land),
                &mut schedule,
                None,
            );
            windows[2] = Some(w);
            t = w.end;
            schedule.push(Transfer {
                at: t,
                kind: TransferKind::StepDone(Step::S4BufferToSlow),
                line: 0,
            });
        }
        let retire = t + complete_latency;
        schedule.push(Transfer {
            at: retire,
            kind: TransferKind::StepDone(Step::S5Complete),
            line: 0,
        });
        // Stable: equal-time transfers keep generation order.
        schedule.sort_by_key(|x| x.at);

        for (line, &at) in s2_land.iter().enumerate() {
            if let Some(v) = plan.victim {
                self.migration_queues[tier_slot(v.from.tier)].issue(v.vpn, line as u32, at);
            }
        }
        for (line, &at) in s3_read.iter().enumerate() {
            self.migration_queues[tier_slot(plan.hot.from.tier)].issue(plan.hot.vpn, line as u32, at);
        }

        self.next_id += 1;
        self.active = Some(MigrationJob {
            id: self.next_id,
            hot: plan.hot,
            victim: plan.victim,
            free_ua: plan.free_ua,
            step: Step::S2VictimToHotBuffer,
            bitvec_in: BitVector::new(lpp),
            bitvec_out: BitVector::new(lpp),
            request_cycle,
            start_cycle: start,
            lines_per_page: lpp,
            incoming_flagged: plan.victim.is_none(),
            schedule,
            cursor: 0,
            s2_land,
            s3_read,
            windows,
            transfers_done: 0,
            retire_cycle: retire,
            stalled_requests: 0,
            buffer_served: 0,
            redirected: 0,
        });
        self.active.as_ref().expect("just set")
    }

    /// Applies every transfer scheduled at or before `now`.
    pub fn tick(
        &mut self,
        now: u64,
        store: &mut FrameStore,
        frame_index: impl Fn(PhysicalFrame) -> u64,
    ) -> Vec<SimEvent> {
        let mut events = Vec::new();
        let Some(job) = self.active.as_mut() else {
            return events;
        };
        for q in &mut self.migration_queues {
            q.retire_until(now);
        }
        while let Some(&tr) = job.schedule.get(job.cursor) {
            if tr.at > now {
                break;
            }
            job.cursor += 1;
            match tr.kind {
                TransferKind::S2Land => {
                    let v = job.victim.expect("S2 only runs for pair swaps");
                    let mut data = store.read(frame_index(v.from), tr.line);
                    for e in self.wait_queue.drain_line(v.vpn, tr.line) {
                        if let Some(d) = e.data {
                            data = d;
                        }
                        events.push(SimEvent::WaitServed { job: job.id, entry: e });
                    }
                    self.hot_buffer.load(v.vpn, tr.line, data);
                    job.transfers_done += 1;
                }
                TransferKind::S3Read => {
                    let mut data = store.read(frame_index(job.hot.from), tr.line);
                    for e in self.wait_queue.drain_line(job.hot.vpn, tr.line) {
                        if let Some(d) = e.data {
                            data = d;
                        }
                        events.push(SimEvent::WaitServed { job: job.id, entry: e });
                    }
                    self.cold_buffer.load(job.hot.vpn, tr.line, data);
                }
                TransferKind::S3Land => {
                    let data = self.cold_buffer.take(tr.line);
                    store.write(frame_index(job.hot.to), tr.line, data);
                    job.bitvec_in.set(tr.line);
                    job.transfers_done += 1;
                }
                TransferKind::S4Land => {
                    let v = job.victim.expect("S4 only runs for pair swaps");
                    let data = self.hot_buffer.take(tr.line);
                    store.write(frame_index(v.to), tr.line, data);
                    job.bitvec_out.set(tr.line);
                    job.transfers_done += 1;
                }
                TransferKind::StepDone(step) => {
                    let next = match step {
                        Step::S2VictimToHotBuffer => Step::S3HotPageToFast,
                        Step::S3HotPageToFast if job.victim.is_some() => Step::S4BufferToSlow,
                        Step::S3HotPageToFast | Step::S4BufferToSlow => Step::S5Complete,
                        _ => Step::S5Complete,
                    };
                    if step == Step::S3HotPageToFast {
                        self.cold_buffer.release();
                    }
                    if next == Step::S5Complete && step != Step::S5Complete {
                        if job.victim.is_some() {
                            self.hot_buffer.release();
                        }
                        events.push(SimEvent::DataPlaced { job: job.id });
                        // S5 is reached at retirement, after the completion
                        // broadcast.
                        continue;
                    }
                    if step == Step::S5Complete {
                        job.step = Step::S5Complete;
                        events.push(SimEvent::StepReached {
                            job: job.id,
                            step: Step::S5Complete,
                        });
                        events.push(SimEvent::Retired { job: job.id });
                        break;
                    }
                    job.step = next;
                    events.push(SimEvent::StepReached {
                        job: job.id,
                        step: next,
                    });
                }
            }
        }
        events
    }

    /// Removes the retired job, resetting its bit vectors.
    pub fn retire(&mut self) -> MigrationJob {
        let mut job = self.active.take().expect("retire without an active job");
        assert!(job.is_finished(), "job retired before its schedule completed");
        assert!(
            self.wait_queue.pending_for(job.hot.vpn) == 0
                && job.victim.is_none_or(|v| self.wait_queue.pending_for(v.vpn) == 0),
            "wait queue not drained at retirement"
        );
        self.records.push(JobRecord {
            hot_vpn: job.hot.vpn,
            victim_vpn: job.victim.map(|v| v.vpn),
            pair: job.is_pair(),
            start_cycle: job.request_cycle,
            end_cycle: job.retire_cycle,
            stalled_requests: job.stalled_requests,
            buffer_served: job.buffer_served,
            redirected: job.redirected,
        });
        job.bitvec_in.reset();
        job.bitvec_out.reset();
        job
    }

    /// Where `line` of an in-flight page lives, following the controller's
    /// view of the job and, for flagged pages, the LLC-miss resolution.
    pub fn locate(
        &self,
        vpn: VirtualPageId,
        line: u32,
        geom: &crate::address_space::MemoryGeometry,
    ) -> Option<LineLocation> {
        let job = self.active.as_ref()?;
        if self.config.blocking {
            return Some(LineLocation::Pending {
                ready_at: job.retire_cycle,
            });
        }
        if let Some(v) = job.victim.filter(|v| v.vpn == vpn) {
            let flags = FlagView { ua: v.ua };
            let target = resolve_memory_target(
                &flags,
                line,
                Some(InFlight {
                    destination: v.to,
                    landed: &job.bitvec_out,
                    residency: BufferKind::Hot,
                    buffer_holds_line: self.hot_buffer.owner == Some(vpn) && self.hot_buffer.holds(line),
                }),
                geom,
            );
            return Some(match target {
                MemoryTarget::FrameAccess { frame, .. } => LineLocation::Frame(frame),
                MemoryTarget::BufferAccess { which, .. } => LineLocation::Buffer(which),
                MemoryTarget::StallUntilBuffered => LineLocation::Pending {
                    ready_at: job.s2_land[line as usize],
                },
            });
        }
        if job.hot.vpn != vpn {
            return None;
        }
        let hot = job.hot;
        let in_cold = self.cold_buffer.owner == Some(vpn) && self.cold_buffer.holds(line);
        if job.bitvec_in.get(line) {
            return Some(LineLocation::Frame(hot.to));
        }
        if in_cold {
            return Some(LineLocation::Buffer(BufferKind::Cold));
        }
        if job.incoming_flagged {
            Some(LineLocation::Pending {
                ready_at: job.s3_read[line as usize],
            })
        } else {
            Some(LineLocation::Frame(hot.from))
        }
    }

    /// A demand (LLC-miss) request to an in-flight page.
    #[allow(clippy::too_many_arguments)]
    pub fn intercept_access(
        &mut self,
        core: usize,
        vpn: VirtualPageId,
        line: u32,
        rw: Rw,
        now: u64,
        geom: &crate::address_space::MemoryGeometry,
        buffer_latency: u64,
    ) -> Option<InterceptOutcome> {
        let loc = self.locate(vpn, line, geom)?;
        let job = self.active.as_mut().expect("locate found a job");
        Some(match loc {
            LineLocation::Frame(f) => {
                job.redirected += 1;
                InterceptOutcome::RedirectedToFrame(f)
            }
            LineLocation::Buffer(which) => {
                job.buffer_served += 1;
                InterceptOutcome::ServedFromBuffer {
                    which,
                    latency: buffer_latency,
                }
            }
            LineLocation::Pending { ready_at } => {
                job.stalled_requests += 1;
                if !self.config.blocking {
                    self.wait_queue.push(WaitEntry {
                        core: Some(core),
                        vpn,
                        line,
                        rw,
                        enqueue_cycle: now,
                        data: None,
                    });
                }
                InterceptOutcome::Enqueued { ready_at }
            }
        })
    }

    /// A writeback of a full line to an in-flight page. Returns the frame to
    /// write when the line is frame-resident; buffer-resident and pending
    /// lines are absorbed by the controller.
    pub fn intercept_writeback(
        &mut self,
        vpn: VirtualPageId,
        line: u32,
        data: LineData,
        now: u64,
        geom: &crate::address_space::MemoryGeometry,
    ) -> Option<Option<PhysicalFrame>> {
        // Writebacks never block, even in blocking mode.
        let blocking = self.config.blocking;
        self.config.blocking = false;
        let loc = self.locate(vpn, line, geom);
        self.config.blocking = blocking;
        Some(match loc? {
            LineLocation::Frame(f) => Some(f),
            LineLocation::Buffer(which) => {
                let buf = match which {
                    BufferKind::Hot => &mut self.hot_buffer,
                    BufferKind::Cold => &mut self.cold_buffer,
                };
                *buf.get_mut(line).expect("located in buffer") = data;
                None
            }
            LineLocation::Pending { .. } => {
                self.wait_queue.push(WaitEntry {
                    core: None,
                    vpn,
                    line,
                    rw: Rw::Write,
                    enqueue_cycle: now,
                    data: Some(data),
                });
                None
            }
        })
    }

    pub fn buffer(&self, which: BufferKind) -> &TransferBuffer {
        match which {
            BufferKind::Hot => &self.hot_buffer,
            BufferKind::Cold => &self.cold_buffer,
        }
    }
}

fn tier_slot(t: Tier) -> usize {
    match t {
        Tier::Fast => 0,
        Tier::Slow => 1,
    }
}

/// A flagged (ongoing) view used when resolving victim lines.
struct FlagView {
    ua: UnifiedPageId,
}

impl crate::translation::MappingFlags for FlagView {
    fn ua(&self) -> UnifiedPageId {
        self.ua
    }
    fn ra(&self) -> Option<PhysicalFrame> {
        None
    }
    fn migrated(&self) -> bool {
        false
    }
    fn ongoing_migration(&self) -> bool {
        true
    }
}

/// Least recently used candidate, ties to the lowest vpn.
pub fn select_victim<I>(candidates: I) -> Option<VirtualPageId>
where
    I: IntoIterator<Item = (VirtualPageId, u64)>,
{
    candidates
        .into_iter()
        .min_by_key(|&(vpn, last)| (last, vpn))
        .map(|(v, _)| v)
}

pub const EMPTY_LINE: LineData = [0; WORDS_PER_LINE];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::MemoryGeometry;

    fn geom() -> MemoryGeometry {
        MemoryGeometry::new(64 * 4096, 128 * 4096, 4096).unwrap()
    }

    fn controller(blocking: bool) -> MigrationController {
        MigrationController::new(ControllerConfig {
            lines_per_page: 64,
            line_bytes: 64,
            queue_capacity: 2,
            blocking,
        })
    }

    fn unit() -> TransferLatencies {
        TransferLatencies {
            fast_read: 1,
            fast_write: 1,
            slow_read: 1,
            slow_write: 1,
            buffer_access: 1,
        }
    }

    fn pair_plan() -> JobPlan {
        JobPlan {
            hot: PageMove {
                vpn: VirtualPageId(2),
                ua: UnifiedPageId(164),
                from: PhysicalFrame::slow(100),
                to: PhysicalFrame::fast(50),
            },
            victim: Some(PageMove {
                vpn: VirtualPageId(1),
                ua: UnifiedPageId(50),
                from: PhysicalFrame::fast(50),
                to: PhysicalFrame::slow(100),
            }),
            free_ua: None,
        }
    }

    fn fill(store: &mut FrameStore, g: &MemoryGeometry, f: PhysicalFrame, v: u64) {
        for l in 0..64 {
            store.write(g.frame_index(f), l, [v; 8]);
        }
    }

    #[test]
    fn bitvector_basics() {
        let mut b = BitVector::new(64);
        assert_eq!(b.count_ones(), 0);
        b.set(0);
        b.set(63);
        b.set(63);
        assert!(b.get(63) && !b.get(1));
        assert_eq!(b.count_ones(), 2);
        b.reset();
        assert_eq!(b.count_ones(), 0);
    }

    #[test]
    fn select_victim_is_lru_with_vpn_tiebreak() {
        let v = select_victim([(VirtualPageId(5), 20), (VirtualPageId(9), 10)]);
        assert_eq!(v, Some(VirtualPageId(9)));
        let v = select_victim([(VirtualPageId(5), 10), (VirtualPageId(3), 10)]);
        assert_eq!(v, Some(VirtualPageId(3)));
        assert_eq!(select_victim(std::iter::empty()), None);
    }

    #[test]
    fn pair_swap_moves_data() {
        let g = geom();
        let mut store = FrameStore::new(64);
        fill(&mut store, &g, PhysicalFrame::fast(50), 0x1111);
        fill(&mut store, &g, PhysicalFrame::slow(100), 0x2222);
        let mut c = controller(false);
        c.start(pair_plan(), 0, 0, 0, &unit());
        let ev = c.tick(u64::MAX, &mut store, |f| g.frame_index(f));
        assert!(ev.contains(&SimEvent::Retired { job: 1 }));
        let job = c.retire();
        assert_eq!(job.transfers_done(), 192);
        assert_eq!(job.bitvec_in.count_ones(), 0, "reset at retirement");
        for l in 0..64 {
            assert_eq!(store.read(g.frame_index(PhysicalFrame::slow(100)), l), [0x1111; 8]);
            assert_eq!(store.read(g.frame_index(PhysicalFrame::fast(50)), l), [0x2222; 8]);
        }
        assert!(c.hot_buffer.owner.is_none() && c.cold_buffer.owner.is_none());
    }

    #[test]
    fn zero_latency_job_completes_at_start() {
        let g = geom();
        let mut store = FrameStore::new(64);
        let mut c = controller(false);
        let lat = TransferLatencies {
            fast_read: 0,
            fast_write: 0,
            slow_read: 0,
            slow_write: 0,
            buffer_access: 0,
        };
        let job = c.start(pair_plan(), 7, 7, 0, &lat);
        assert_eq!(job.retire_cycle, 7);
        let ev = c.tick(7, &mut store, |f| g.frame_index(f));
        assert!(ev.contains(&SimEvent::Retired { job: 1 }));
        assert_eq!(c.retire().transfers_done(), 3 * 64);
    }

    #[test]
    fn one_way_skips_s2_and_s4() {
        let g = geom();
        let mut store = FrameStore::new(64);
        fill(&mut store, &g, PhysicalFrame::slow(3), 0xAB);
        let mut c = controller(false);
        let plan = JobPlan {
            hot: PageMove {
                vpn: VirtualPageId(2),
                ua: UnifiedPageId(67),
                from: PhysicalFrame::slow(3),
                to: PhysicalFrame::fast(9),
            },
            victim: None,
            free_ua: Some(UnifiedPageId(9)),
        };
        let job = c.start(plan, 0, 0, 0, &unit());
        assert_eq!(job.step_end(Step::S2VictimToHotBuffer), 0);
        assert_eq!(job.step_end(Step::S4BufferToSlow), job.step_end(Step::S3HotPageToFast));
        let ev = c.tick(u64::MAX, &mut store, |f| g.frame_index(f));
        let steps: Vec<Step> = ev
            .iter()
            .filter_map(|e| match e {
                SimEvent::StepReached { step, .. } => Some(*step),
                _ => None,
            })
            .collect();
        assert_eq!(steps, vec![Step::S3HotPageToFast, Step::S5Complete]);
        assert_eq!(c.retire().transfers_done(), 64);
        assert_eq!(store.read(g.frame_index(PhysicalFrame::fast(9)), 0), [0xAB; 8]);
    }

    #[test]
    fn intercept_follows_line_progress() {
        let g = geom();
        let mut store = FrameStore::new(64);
        let mut c = controller(false);
        c.start(pair_plan(), 0, 0, 0, &unit());
        let victim = VirtualPageId(1);
        let hot = VirtualPageId(2);
        // Line 3 of the victim lands in the hot buffer at 1 + 1 + 3 = 5.
        match c.intercept_access(0, victim, 3, Rw::Read, 0, &g, 10) {
            Some(InterceptOutcome::Enqueued { ready_at }) => assert_eq!(ready_at, 5),
            other => panic!("{other:?}"),
        }
        c.tick(5, &mut store, |f| g.frame_index(f));
        assert_eq!(c.wait_queue.len(), 0);
        assert_eq!(
            c.intercept_access(0, victim, 3, Rw::Read, 5, &g, 10),
            Some(InterceptOutcome::ServedFromBuffer {
                which: BufferKind::Hot,
                latency: 10
            })
        );
        // The incoming page is served from its slow frame until its line lands.
        assert_eq!(
            c.intercept_access(0, hot, 0, Rw::Read, 5, &g, 10),
            Some(InterceptOutcome::RedirectedToFrame(PhysicalFrame::slow(100)))
        );
        let s3_end = c.active().unwrap().step_end(Step::S3HotPageToFast);
        c.tick(s3_end, &mut store, |f| g.frame_index(f));
        assert_eq!(
            c.intercept_access(0, hot, 0, Rw::Read, s3_end, &g, 10),
            Some(InterceptOutcome::RedirectedToFrame(PhysicalFrame::fast(50)))
        );
        assert_eq!(c.intercept_access(0, VirtualPageId(77), 0, Rw::Read, 0, &g, 10), None);
    }

    #[test]
    fn pending_writeback_applies_when_line_lands() {
        let g = geom();
        let mut store = FrameStore::new(64);
        fill(&mut store, &g, PhysicalFrame::fast(50), 0x1111);
        let mut c = controller(false);
        c.start(pair_plan(), 0, 0, 0, &unit());
        assert_eq!(
            c.intercept_writeback(VirtualPageId(1), 10, [0x9999; 8], 0, &g),
            Some(None)
        );
        assert_eq!(c.wait_queue.len(), 1);
        c.tick(u64::MAX, &mut store, |f| g.frame_index(f));
        c.retire();
        assert_eq!(store.read(g.frame_index(PhysicalFrame::slow(100)), 10), [0x9999; 8]);
        assert_eq!(store.read(g.frame_index(PhysicalFrame::slow(100)), 11), [0x1111; 8]);
    }

    #[test]
    fn blocking_mode_waits_for_retirement() {
        let g = geom();
        let mut c = controller(true);
        let job = c.start(pair_plan(), 0, 0, 4, &unit());
        let retire = job.retire_cycle;
        assert_eq!(
            c.intercept_access(0, VirtualPageId(2), 0, Rw::Read, 0, &g, 10),
            Some(InterceptOutcome::Enqueued { ready_at: retire })
        );
    }

    #[test]
    fn admission_queue_is_bounded_fifo() {
        let mut c = controller(false);
        assert_eq!(c.enqueue(VirtualPageId(1)), RequestOutcome::Queued);
        assert_eq!(c.enqueue(VirtualPageId(2)), RequestOutcome::Queued);
        assert_eq!(c.enqueue(VirtualPageId(1)), RequestOutcome::Queued);
        assert_eq!(
            c.enqueue(VirtualPageId(3)),
            RequestOutcome::Rejected(RejectReason::QueueFull)
        );
        assert_eq!(c.dropped_candidates, 1);
        assert_eq!(c.next_queued(), Some(VirtualPageId(1)));
        assert_eq!(c.next_queued(), Some(VirtualPageId(2)));
        assert_eq!(c.next_queued(), None);
    }
}
