//! TLB coherence: the migration-time broadcast that refreshes extended TLB
//! entries in place, and the conventional shootdown used by the baseline.

use serde::{Deserialize, Serialize};

use crate::address_space::VirtualPageId;
use crate::translation::{EptEntry, Tlb, TlbEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcmConfig {
    /// Fixed broadcast cost in cycles.
    pub broadcast_cost: u64,
    /// Extra cycles per core reached.
    pub per_core_cost: u64,
}

impl Default for TcmConfig {
    fn default() -> Self {
        Self {
            broadcast_cost: 10,
            per_core_cost: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoherenceStats {
    pub broadcasts: u64,
    pub entry_updates: u64,
    pub shootdown_events: u64,
    pub tlb_invalidations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Broadcast {
    pub latency: u64,
    /// Cores whose TLB held the page and were updated.
    pub updated: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TlbCoherence {
    pub config: TcmConfig,
    pub stats: CoherenceStats,
}

impl TlbCoherence {
    pub fn new(config: TcmConfig) -> Self {
        Self {
            config,
            stats: CoherenceStats::default(),
        }
    }

    pub fn latency(&self, cores: usize) -> u64 {
        self.config.broadcast_cost + self.config.per_core_cost * cores as u64
    }

    /// Pushes the page table entry's current translation and flags into every
    /// TLB that caches the page. TLBs without the page are left alone.
    pub fn broadcast(&mut self, entry: &EptEntry, tlbs: &mut [Tlb]) -> Broadcast {
        let fresh = TlbEntry::from(entry);
        let mut updated = 0;
        for tlb in tlbs.iter_mut() {
            if let Some(e) = tlb.peek_mut(entry.vpn) {
                *e = fresh;
                updated += 1;
            }
        }
        self.stats.broadcasts += 1;
        self.stats.entry_updates += updated as u64;
        Broadcast {
            latency: self.latency(tlbs.len()),
            updated,
        }
    }

    /// One shootdown: invalidates the page in every TLB that holds it.
    /// Returns the number of TLBs invalidated.
    pub fn shootdown(&mut self, vpn: VirtualPageId, tlbs: &mut [Tlb]) -> usize {
        let n = tlbs.iter_mut().filter_map(|t| t.invalidate(vpn).then_some(())).count();
        self.stats.shootdown_events += 1;
        self.stats.tlb_invalidations += n as u64;
        n
    }
}

/// True when every cached copy of `entry` matches the page table.
pub fn tlbs_agree(entry: &EptEntry, tlbs: &[Tlb]) -> bool {
    let want = TlbEntry::from(entry);
    tlbs.iter().all(|t| t.peek(entry.vpn).is_none_or(|e| *e == want))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address_space::{PhysicalFrame, UnifiedPageId};

    fn setup(holders: &[usize]) -> (EptEntry, Vec<Tlb>) {
        let e = EptEntry::fresh(VirtualPageId(5), UnifiedPageId(9));
        let mut tlbs: Vec<Tlb> = (0..16).map(|_| Tlb::new(64)).collect();
        for &h in holders {
            tlbs[h].fill(TlbEntry::from(&e));
        }
        (e, tlbs)
    }

    #[test]
    fn broadcast_updates_holders_only() {
        let (mut e, mut tlbs) = setup(&[1, 4, 11]);
        let mut c = TlbCoherence::new(TcmConfig::default());
        e.ra = Some(PhysicalFrame::fast(3));
        e.migrated = true;
        let b = c.broadcast(&e, &mut tlbs);
        assert_eq!(
            b,
            Broadcast {
                latency: 26,
                updated: 3
            }
        );
        assert!(tlbs_agree(&e, &tlbs));
        assert_eq!(tlbs.iter().filter(|t| t.peek(e.vpn).is_some()).count(), 3);
        assert_eq!(tlbs[4].peek(e.vpn).unwrap().ra, Some(PhysicalFrame::fast(3)));
    }

    #[test]
    fn broadcast_without_holders_is_free_of_updates() {
        let (e, mut tlbs) = setup(&[]);
        let mut c = TlbCoherence::new(TcmConfig::default());
        assert_eq!(c.broadcast(&e, &mut tlbs).updated, 0);
        assert_eq!(c.stats.entry_updates, 0);
        assert_eq!(c.stats.broadcasts, 1);
    }

    #[test]
    fn repeated_broadcasts_leave_latest_translation() {
        let (mut e, mut tlbs) = setup(&[0, 2]);
        let mut c = TlbCoherence::new(TcmConfig::default());
        c.broadcast(&e, &mut tlbs);
        let once: Vec<_> = tlbs.iter().map(|t| t.peek(e.vpn).copied()).collect();
        c.broadcast(&e, &mut tlbs);
        let twice: Vec<_> = tlbs.iter().map(|t| t.peek(e.vpn).copied()).collect();
        assert_eq!(once, twice);
        e.ra = Some(PhysicalFrame::slow(1));
        c.broadcast(&e, &mut tlbs);
        e.ra = Some(PhysicalFrame::fast(2));
        c.broadcast(&e, &mut tlbs);
        assert_eq!(tlbs[2].peek(e.vpn).unwrap().ra, Some(PhysicalFrame::fast(2)));
    }

    #[test]
    fn shootdown_counts_one_event() {
        let (e, mut tlbs) = setup(&[3, 7]);
        let mut c = TlbCoherence::new(TcmConfig::default());
        assert_eq!(c.shootdown(e.vpn, &mut tlbs), 2);
        assert_eq!(c.stats.shootdown_events, 1);
        assert!(tlbs.iter().all(|t| t.peek(e.vpn).is_none()));
    }
}
