//! Flat unified address space over a fast and a slow memory tier.
//!
//! The OS sees a single pool of unified pages (UA). Fast frames occupy the
//! low unified indices and slow frames follow contiguously, so every UA has
//! a default frame. Migration never changes a page's UA; it only changes the
//! frame that currently backs it.

use serde::{Deserialize, Serialize};

use crate::error::AddressError;

pub const DEFAULT_PAGE_SIZE: u64 = 4096;
pub const VIRTUAL_ADDRESS_BITS: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    Fast,
    Slow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnifiedPageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtualPageId(pub u64);

/// A frame inside one tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhysicalFrame {
    pub tier: Tier,
    pub frame: u64,
}

impl PhysicalFrame {
    pub const fn fast(frame: u64) -> Self {
        Self {
            tier: Tier::Fast,
            frame,
        }
    }

    pub const fn slow(frame: u64) -> Self {
        Self {
            tier: Tier::Slow,
            frame,
        }
    }
}

impl std::fmt::Display for PhysicalFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.tier {
            Tier::Fast => write!(f, "FA{}", self.frame),
            Tier::Slow => write!(f, "SA{}", self.frame),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryGeometry {
    pub fast_capacity: u64,
    pub slow_capacity: u64,
    pub page_size: u64,
    pub fast_pages: u64,
    pub slow_pages: u64,
    pub ra_bits_fast: u32,
    pub ra_bits_slow: u32,
}

/// Bits needed to index `n` items, `ceil(log2(n))`; zero for `n <= 1`.
pub fn index_bits(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

impl MemoryGeometry {
    /// Builds a geometry. Capacities must be multiples of the page size;
    /// zero capacities are accepted here so the storage calculator can be
    /// evaluated on degenerate inputs, see [`MemoryGeometry::require_nonempty`].
    pub fn new(fast_capacity: u64, slow_capacity: u64, page_size: u64) -> Result<Self, AddressError> {
        if page_size == 0 {
            return Err(AddressError::ZeroPageSize);
        }
        for (name, cap) in [("fast", fast_capacity), ("slow", slow_capacity)] {
            if cap % page_size != 0 {
                return Err(AddressError::NotPageMultiple {
                    tier: name,
                    capacity: cap,
                    page_size,
                });
            }
        }
        let fast_pages = fast_capacity / page_size;
        let slow_pages = slow_capacity / page_size;
        Ok(Self {
            fast_capacity,
            slow_capacity,
            page_size,
            fast_pages,
            slow_pages,
            ra_bits_fast: index_bits(fast_pages),
            ra_bits_slow: index_bits(slow_pages),
        })
    }

    pub fn require_nonempty(&self) -> Result<(), AddressError> {
        if self.fast_pages == 0 || self.slow_pages == 0 {
            return Err(AddressError::EmptyTier);
        }
        Ok(())
    }

    pub fn total_pages(&self) -> u64 {
        self.fast_pages + self.slow_pages
    }

    pub fn total_capacity(&self) -> u64 {
        self.fast_capacity + self.slow_capacity
    }

    pub fn pages_in(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Fast => self.fast_pages,
            Tier::Slow => self.slow_pages,
        }
    }

    pub fn page_shift(&self) -> u32 {
        self.page_size.trailing_zeros()
    }

    pub fn contains(&self, ua: UnifiedPageId) -> bool {
        ua.0 < self.total_pages()
    }

    pub fn check_frame(&self, frame: PhysicalFrame) -> Result<(), AddressError> {
        if frame.frame >= self.pages_in(frame.tier) {
            return Err(AddressError::FrameOutOfRange { frame });
        }
        Ok(())
    }

    /// Dense index of a frame across both tiers (fast first).
    pub fn frame_index(&self, frame: PhysicalFrame) -> u64 {
        match frame.tier {
            Tier::Fast => frame.frame,
            Tier::Slow => self.fast_pages + frame.frame,
        }
    }
}

/// The frame that backs `ua` when the page has never been migrated.
pub fn default_frame_of(ua: UnifiedPageId, geom: &MemoryGeometry) -> Result<PhysicalFrame, AddressError> {
    if !geom.contains(ua) {
        return Err(AddressError::UaOutOfRange {
            ua: ua.0,
            total: geom.total_pages(),
        });
    }
    Ok(if ua.0 < geom.fast_pages {
        PhysicalFrame::fast(ua.0)
    } else {
        PhysicalFrame::slow(ua.0 - geom.fast_pages)
    })
}

/// Inverse of [`default_frame_of`].
pub fn ua_of_default_frame(frame: PhysicalFrame, geom: &MemoryGeometry) -> Result<UnifiedPageId, AddressError> {
    geom.check_frame(frame)?;
    Ok(UnifiedPageId(geom.frame_index(frame)))
}

/// Extra page-table bytes: each fast entry carries `ra_bits_fast` and each
/// slow entry `ra_bits_slow` bits of remapped address, plus four flag bits
/// (migrated, ongoing, pair, buffer residency).
pub fn ept_storage_overhead(geom: &MemoryGeometry) -> u64 {
    let bits =
        geom.fast_pages * (u64::from(geom.ra_bits_fast) + 4) + geom.slow_pages * (u64::from(geom.ra_bits_slow) + 4);
    bits.div_ceil(8)
}

/// Extra TLB bytes: remapped address at slow-tier width plus migrated,
/// ongoing and RA-valid bits per entry.
pub fn tlb_storage_overhead(entries: u64, geom: &MemoryGeometry) -> u64 {
    (entries * (u64::from(geom.ra_bits_slow) + 3)).div_ceil(8)
}

/// Bytes of a conventional TLB holding VPN, unified PPN, valid and dirty.
pub fn conventional_tlb_bytes(entries: u64, geom: &MemoryGeometry) -> u64 {
    let vpn_bits = u64::from(VIRTUAL_ADDRESS_BITS - geom.page_shift());
    let ppn_bits = u64::from(index_bits(geom.total_pages()));
    (entries * (vpn_bits + ppn_bits + 2)).div_ceil(8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadReport {
    pub ept_extension_bytes: u64,
    pub tlb_extension_bytes: u64,
    pub ept_fraction_of_memory: f64,
    pub conventional_tlb_bytes: u64,
    /// Extension relative to the conventional TLB alone.
    pub tlb_ratio_vs_conventional: f64,
    /// Extension relative to the whole extended TLB.
    pub tlb_ratio_vs_extended: f64,
}

impl OverheadReport {
    pub fn compute(geom: &MemoryGeometry, tlb_entries: u64) -> Self {
        let ept = ept_storage_overhead(geom);
        let tlb = tlb_storage_overhead(tlb_entries, geom);
        let conventional = conventional_tlb_bytes(tlb_entries, geom);
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self {
            ept_extension_bytes: ept,
            tlb_extension_bytes: tlb,
            ept_fraction_of_memory: ratio(ept, geom.total_capacity()),
            conventional_tlb_bytes: conventional,
            tlb_ratio_vs_conventional: ratio(tlb, conventional),
            tlb_ratio_vs_extended: ratio(tlb, conventional + tlb),
        }
    }

    pub const CSV_HEADER: &'static str = "ept_bytes,tlb_bytes,fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.ept_extension_bytes, self.tlb_extension_bytes, self.ept_fraction_of_memory
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;
    const MIB: u64 = 1 << 20;

    fn config1() -> MemoryGeometry {
        MemoryGeometry::new(GIB, 16 * GIB, 4096).unwrap()
    }

    #[test]
    fn config1_geometry() {
        let g = config1();
        assert_eq!(g.fast_pages, 262_144);
        assert_eq!(g.slow_pages, 4_194_304);
        assert_eq!(g.ra_bits_fast, 18);
        assert_eq!(g.ra_bits_slow, 22);
        assert_eq!(g.total_pages(), g.fast_pages + g.slow_pages);
    }

    #[test]
    fn default_frames_at_tier_boundary() {
        let g = config1();
        assert_eq!(default_frame_of(UnifiedPageId(0), &g).unwrap(), PhysicalFrame::fast(0));
        assert_eq!(
            default_frame_of(UnifiedPageId(262_144), &g).unwrap(),
            PhysicalFrame::slow(0)
        );
        assert_eq!(
            default_frame_of(UnifiedPageId(262_143), &g).unwrap(),
            PhysicalFrame::fast(262_143)
        );
        assert!(matches!(
            default_frame_of(UnifiedPageId(g.total_pages()), &g),
            Err(AddressError::UaOutOfRange { .. })
        ));
    }

    #[test]
    fn default_frame_is_a_bijection_on_small_geometries() {
        for (fast, slow) in [(1, 1), (3, 5), (8, 8), (7, 1)] {
            let g = MemoryGeometry::new(fast * 4096, slow * 4096, 4096).unwrap();
            let mut seen = std::collections::HashSet::new();
            for ua in 0..g.total_pages() {
                let f = default_frame_of(UnifiedPageId(ua), &g).unwrap();
                g.check_frame(f).unwrap();
                assert!(seen.insert(f));
                assert_eq!(ua_of_default_frame(f, &g).unwrap(), UnifiedPageId(ua));
            }
            assert_eq!(seen.len() as u64, fast + slow);
        }
    }

    #[test]
    fn ept_overhead_examples() {
        assert_eq!(ept_storage_overhead(&config1()), 14_352_384);
        let config2 = MemoryGeometry::new(256 * MIB, 16 * GIB, 4096).unwrap();
        assert_eq!(ept_storage_overhead(&config2), 13_795_328);
        let empty = MemoryGeometry::new(0, 0, 4096).unwrap();
        assert_eq!(ept_storage_overhead(&empty), 0);
        assert!(empty.require_nonempty().is_err());
    }

    #[test]
    fn tlb_overhead_examples() {
        let g = config1();
        assert_eq!(tlb_storage_overhead(4096, &g), 12_800);
        assert_eq!(tlb_storage_overhead(0, &g), 0);
        assert_eq!(tlb_storage_overhead(1024, &g), 3_200);
    }

    #[test]
    fn report_fractions() {
        let r = OverheadReport::compute(&config1(), 4096);
        assert!((r.ept_fraction_of_memory - 0.0008).abs() < 0.00005);
        // 4096 x 61 bits: 36-bit VPN, 23-bit unified PPN, valid, dirty.
        assert_eq!(r.conventional_tlb_bytes, 31_232);
        assert!((r.tlb_ratio_vs_extended - 0.29).abs() < 0.005);
        assert!((r.tlb_ratio_vs_conventional - 0.41).abs() < 0.005);
    }

    #[test]
    fn rejects_partial_pages() {
        assert!(matches!(
            MemoryGeometry::new(4097, 4096, 4096),
            Err(AddressError::NotPageMultiple { tier: "fast", .. })
        ));
        assert!(MemoryGeometry::new(4096, 4096, 0).is_err());
    }

    #[test]
    fn non_power_of_two_uses_ceiling_log2() {
        let g = MemoryGeometry::new(3 * 4096, 5 * 4096, 4096).unwrap();
        assert_eq!(g.ra_bits_fast, 2);
        assert_eq!(g.ra_bits_slow, 3);
    }

    proptest::proptest! {
        #[test]
        fn ept_overhead_monotone(fast in 0u64..5000, slow in 0u64..5000, df in 0u64..3000, ds in 0u64..3000) {
            let a = MemoryGeometry::new(fast * 4096, slow * 4096, 4096).unwrap();
            let b = MemoryGeometry::new((fast + df) * 4096, (slow + ds) * 4096, 4096).unwrap();
            proptest::prop_assert!(ept_storage_overhead(&a) <= ept_storage_overhead(&b));
        }
    }
}
