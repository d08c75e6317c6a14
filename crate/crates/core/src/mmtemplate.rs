//! Process-memory templates: immutable VMA layouts plus page tables that
//! point into shared pools, attachable to many address spaces at metadata
//! cost only.
//!
//! A template records the virtual layout once. Attaching copies nothing but
//! the metadata (a fixed header, one record per VMA, one record per
//! contiguous page-table range), so the attach cost does not depend on how
//! many content bytes the template maps. Pages backed by byte-addressable
//! pools are installed valid and write-protected; writes break the sharing
//! with a copy into the attaching process. Pages backed by fetch-on-fault
//! pools are installed invalid and become private local pages on first
//! touch.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mempool::{AccessKind, BlockRef, PoolError, PoolKind, PoolSet, PoolStore, PAGE_SIZE};
use crate::simcore::log_uniform;

/// Fixed metadata header per template, bytes.
pub const META_HEADER_BYTES: u64 = 4096;
/// Metadata record per VMA, bytes.
pub const META_PER_VMA: u64 = 64;
/// Metadata record per contiguous page-table range, bytes.
pub const META_PER_PTE_RANGE: u64 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("mapping [{va:#x}, +{len:#x}) overlaps an existing VMA")]
    Overlap { va: u64, len: u64 },
    #[error("address {va:#x} or length {len:#x} is not page aligned")]
    Alignment { va: u64, len: u64 },
    #[error("range [{va:#x}, +{len:#x}) is not covered by mapped VMAs")]
    UnmappedRange { va: u64, len: u64 },
    #[error("pool offset {offset:#x} + {len:#x} exceeds allocated pool bytes {allocated:#x}")]
    BadOffset { offset: u64, len: u64, allocated: u64 },
    #[error("template {template}: VMA at {va:#x} has pages with neither page table entries nor zero-fill")]
    IncompleteTemplate { template: u64, va: u64 },
    #[error("segmentation fault: {op} at {va:#x}")]
    Segmentation { va: u64, op: &'static str },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Prot {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Prot {
    pub const fn rw() -> Self {
        Prot { read: true, write: true, exec: false }
    }
    pub const fn read_only() -> Self {
        Prot { read: true, write: false, exec: false }
    }
    pub const fn rx() -> Self {
        Prot { read: true, write: false, exec: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Anonymous,
    FileBacked,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VmaDescriptor {
    pub va_start: u64,
    pub length: u64,
    pub prot: Prot,
    pub kind: MappingKind,
    pub private: bool,
    /// Pages materialize as zeroed local memory on first touch instead of
    /// requiring page-table entries.
    pub zero_fill: bool,
}

impl VmaDescriptor {
    pub fn end(&self) -> u64 {
        self.va_start + self.length
    }
    pub fn pages(&self) -> u64 {
        self.length / PAGE_SIZE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PteEntry {
    pub block: BlockRef,
    pub valid: bool,
    pub write_protected: bool,
}

/// Immutable once built; shared read-only between all attached spaces.
#[derive(Debug)]
pub struct MmTemplate {
    pub id: u64,
    vmas: Vec<VmaDescriptor>,
    ptes: BTreeMap<u64, PteEntry>,
    pte_ranges: u64,
    metadata_bytes: u64,
}

/// Cost constants for attach and fault handling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultModelParams {
    pub attach_cost_container_ms: f64,
    pub attach_cost_vm_ms: f64,
    pub cow_copy_cost_us: f64,
    pub minor_fault_cost_us: f64,
}

impl Default for FaultModelParams {
    fn default() -> Self {
        FaultModelParams {
            attach_cost_container_ms: 4.0,
            attach_cost_vm_ms: 36.0,
            cow_copy_cost_us: 3.0,
            minor_fault_cost_us: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachMode {
    Container,
    Vm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    /// Load served in place from a valid shared page.
    Direct,
    /// Invalid entry: page fetched from its pool into local memory.
    MajorFaultFetch,
    /// Write to a protected shared page: local copy taken.
    CowCopy,
    /// Page already private to this space.
    PrivateHit,
    /// First touch of a zero-fill page.
    ZeroFill,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize)]
pub struct FaultCounters {
    pub minor_faults: u64,
    pub major_faults: u64,
    pub cow_faults: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PrivatePage {
    /// Number of writes this space has made to its copy; versions observed
    /// by readers are (template content, writes).
    writes: u64,
}

/// One process view of a template.
#[derive(Debug)]
pub struct AddressSpace {
    pub process_id: u64,
    template: Arc<MmTemplate>,
    private_pages: BTreeMap<u64, PrivatePage>,
    pub counters: FaultCounters,
}

/// What a read observes: shared template content or a private copy with a
/// local write version. Isolation tests compare these across spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentView {
    Shared { va: u64 },
    Private { va: u64, writes: u64 },
}

impl MmTemplate {
    /// `mmt_create`: empty template with a fixed metadata header.
    pub fn new(id: u64) -> Self {
        MmTemplate {
            id,
            vmas: Vec::new(),
            ptes: BTreeMap::new(),
            pte_ranges: 0,
            metadata_bytes: META_HEADER_BYTES,
        }
    }

    pub fn vmas(&self) -> &[VmaDescriptor] {
        &self.vmas
    }

    pub fn metadata_bytes(&self) -> u64 {
        self.metadata_bytes
    }

    pub fn pte_count(&self) -> usize {
        self.ptes.len()
    }

    pub fn pte(&self, va: u64) -> Option<&PteEntry> {
        self.ptes.get(&va)
    }

    pub fn total_pages(&self) -> u64 {
        self.vmas.iter().map(|v| v.pages()).sum()
    }

    fn vma_containing(&self, va: u64) -> Option<&VmaDescriptor> {
        self.vmas.iter().find(|v| va >= v.va_start && va < v.end())
    }

    /// `mmt_add_map`: record one VMA. Rejects unaligned or overlapping
    /// ranges; grows metadata by one VMA record.
    pub fn add_map(&mut self, vma: VmaDescriptor) -> Result<(), TemplateError> {
        if vma.va_start % PAGE_SIZE != 0 || vma.length % PAGE_SIZE != 0 || vma.length == 0 {
            return Err(TemplateError::Alignment { va: vma.va_start, len: vma.length });
        }
        for existing in &self.vmas {
            if vma.va_start < existing.end() && existing.va_start < vma.end() {
                return Err(TemplateError::Overlap { va: vma.va_start, len: vma.length });
            }
        }
        self.vmas.push(vma);
        self.metadata_bytes += META_PER_VMA;
        Ok(())
    }

    /// `mmt_setup_pt`: point `[va, va+len)` at consecutive pool pages
    /// starting at `pool_offset`. Validity policy comes from the pool kind:
    /// byte-addressable pools install valid write-protected entries,
    /// fetch-on-fault pools install invalid entries. One call covers one
    /// contiguous range and costs one range record of metadata.
    pub fn setup_pt(
        &mut self,
        va: u64,
        len: u64,
        pool_offset: u64,
        pool: &PoolStore,
    ) -> Result<(), TemplateError> {
        if va % PAGE_SIZE != 0 || len % PAGE_SIZE != 0 || len == 0 {
            return Err(TemplateError::Alignment { va, len });
        }
        if pool_offset % PAGE_SIZE != 0 {
            return Err(TemplateError::BadOffset {
                offset: pool_offset,
                len,
                allocated: pool.allocated_bytes(),
            });
        }
        if pool_offset + len > pool.allocated_bytes() {
            return Err(TemplateError::BadOffset {
                offset: pool_offset,
                len,
                allocated: pool.allocated_bytes(),
            });
        }
        let mut page = va;
        while page < va + len {
            let vma = self
                .vma_containing(page)
                .ok_or(TemplateError::UnmappedRange { va, len })?;
            if vma.zero_fill {
                return Err(TemplateError::UnmappedRange { va, len });
            }
            page += PAGE_SIZE;
        }
        let (valid, write_protected) = match pool.kind() {
            PoolKind::Cxl | PoolKind::Local => (true, true),
            PoolKind::Rdma => (false, false),
        };
        for i in 0..len / PAGE_SIZE {
            let entry = PteEntry {
                block: BlockRef { pool: pool.kind(), offset: pool_offset + i * PAGE_SIZE },
                valid,
                write_protected,
            };
            self.ptes.insert(va + i * PAGE_SIZE, entry);
        }
        self.pte_ranges += 1;
        self.metadata_bytes += META_PER_PTE_RANGE;
        Ok(())
    }

    /// Every page of every VMA must be either PTE-covered or zero-fill.
    fn check_complete(&self) -> Result<(), TemplateError> {
        for vma in &self.vmas {
            if vma.zero_fill {
                continue;
            }
            let mut page = vma.va_start;
            while page < vma.end() {
                if !self.ptes.contains_key(&page) {
                    return Err(TemplateError::IncompleteTemplate {
                        template: self.id,
                        va: vma.va_start,
                    });
                }
                page += PAGE_SIZE;
            }
        }
        Ok(())
    }

    /// `mmt_attach`: create a process view. The cost covers copying the
    /// template metadata and is independent of mapped content size.
    pub fn attach(
        self: &Arc<Self>,
        process_id: u64,
        mode: AttachMode,
        params: &FaultModelParams,
        rng: &mut impl RngCore,
    ) -> Result<(AddressSpace, f64), TemplateError> {
        self.check_complete()?;
        let base = match mode {
            AttachMode::Container => params.attach_cost_container_ms,
            AttachMode::Vm => params.attach_cost_vm_ms,
        };
        let cost_ms = base * log_uniform(rng, 0.9, 1.11);
        Ok((
            AddressSpace {
                process_id,
                template: Arc::clone(self),
                private_pages: BTreeMap::new(),
                counters: FaultCounters::default(),
            },
            cost_ms,
        ))
    }

    /// JSON dump: VMA table plus run-length-encoded page-table ranges.
    pub fn dump_json(&self) -> String {
        #[derive(Serialize)]
        struct RleRange {
            va_start: u64,
            pages: u64,
            pool: PoolKind,
            pool_offset: u64,
            valid: bool,
            write_protected: bool,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            id: u64,
            metadata_bytes: u64,
            vmas: &'a [VmaDescriptor],
            pte_ranges: Vec<RleRange>,
        }
        let mut ranges: Vec<RleRange> = Vec::new();
        for (&va, pte) in &self.ptes {
            if let Some(last) = ranges.last_mut() {
                let contiguous = last.va_start + last.pages * PAGE_SIZE == va
                    && last.pool == pte.block.pool
                    && last.pool_offset + last.pages * PAGE_SIZE == pte.block.offset
                    && last.valid == pte.valid
                    && last.write_protected == pte.write_protected;
                if contiguous {
                    last.pages += 1;
                    continue;
                }
            }
            ranges.push(RleRange {
                va_start: va,
                pages: 1,
                pool: pte.block.pool,
                pool_offset: pte.block.offset,
                valid: pte.valid,
                write_protected: pte.write_protected,
            });
        }
        let dump = Dump {
            id: self.id,
            metadata_bytes: self.metadata_bytes,
            vmas: &self.vmas,
            pte_ranges: ranges,
        };
        serde_json::to_string_pretty(&dump).expect("template dump")
    }
}

impl AddressSpace {
    pub fn template(&self) -> &MmTemplate {
        &self.template
    }

    pub fn private_page_count(&self) -> u64 {
        self.private_pages.len() as u64
    }

    /// Local bytes attributable to this space: its private pages plus its
    /// copy of the template metadata.
    pub fn local_bytes(&self) -> u64 {
        self.private_pages.len() as u64 * PAGE_SIZE + self.template.metadata_bytes
    }

    /// Drive one page access. Returns the outcome and its latency in
    /// microseconds.
    pub fn handle_access(
        &mut self,
        va: u64,
        is_write: bool,
        load: f64,
        pools: &PoolSet,
        rng: &mut impl RngCore,
        params: &FaultModelParams,
    ) -> Result<(AccessOutcome, f64), TemplateError> {
        let page = va & !(PAGE_SIZE - 1);
        let vma = self
            .template
            .vma_containing(page)
            .ok_or(TemplateError::Segmentation { va, op: "access unmapped address" })?;
        if is_write && !vma.prot.write {
            return Err(TemplateError::Segmentation { va, op: "write to read-only mapping" });
        }
        if !is_write && !vma.prot.read {
            return Err(TemplateError::Segmentation { va, op: "read from no-read mapping" });
        }

        if let Some(p) = self.private_pages.get_mut(&page) {
            if is_write {
                p.writes += 1;
            }
            return Ok((AccessOutcome::PrivateHit, 0.0));
        }

        if vma.zero_fill {
            self.private_pages.insert(page, PrivatePage { writes: is_write as u64 });
            self.counters.minor_faults += 1;
            return Ok((AccessOutcome::ZeroFill, params.minor_fault_cost_us));
        }

        let pte = self
            .template
            .pte(page)
            .ok_or(TemplateError::Segmentation { va, op: "access page without entry" })?;
        let pool = pools.get(pte.block.pool);

        if !pte.valid {
            // Fetch-on-fault: the page lands as a private local copy whether
            // the trigger was a read or a write.
            let lat = pool.sample_access_latency(AccessKind::LazyFetch, load, rng)?;
            self.private_pages.insert(page, PrivatePage { writes: is_write as u64 });
            self.counters.major_faults += 1;
            return Ok((AccessOutcome::MajorFaultFetch, lat));
        }

        if is_write {
            debug_assert!(pte.write_protected);
            self.private_pages.insert(page, PrivatePage { writes: 1 });
            self.counters.cow_faults += 1;
            return Ok((AccessOutcome::CowCopy, params.cow_copy_cost_us));
        }

        let lat = pool.sample_access_latency(AccessKind::DirectRead, load, rng)?;
        Ok((AccessOutcome::Direct, lat))
    }

    /// The content a read of `va` observes right now.
    pub fn observe(&self, va: u64) -> Result<ContentView, TemplateError> {
        let page = va & !(PAGE_SIZE - 1);
        if self
            .template
            .vma_containing(page)
            .is_none()
        {
            return Err(TemplateError::Segmentation { va, op: "observe unmapped address" });
        }
        Ok(match self.private_pages.get(&page) {
            Some(p) => ContentView::Private { va: page, writes: p.writes },
            None => ContentView::Shared { va: page },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{RngHub, ZeroRng};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pools_with(kind: PoolKind, pages: u64) -> (PoolSet, u64) {
        let mut pools = PoolSet::with_default_capacity(16 << 30);
        let mut offset = 0;
        for i in 0..pages {
            let b = pools
                .get_mut(kind)
                .dedup_insert(RngHub::content_hash("tpl", i), 1)
                .unwrap();
            if i == 0 {
                offset = b.offset;
            }
        }
        (pools, offset)
    }

    fn rw_vma(va: u64, pages: u64) -> VmaDescriptor {
        VmaDescriptor {
            va_start: va,
            length: pages * PAGE_SIZE,
            prot: Prot::rw(),
            kind: MappingKind::Anonymous,
            private: true,
            zero_fill: false,
        }
    }

    #[test]
    fn new_template_has_header_metadata_and_no_vmas() {
        let t = MmTemplate::new(1);
        assert_eq!(t.vmas().len(), 0);
        assert_eq!(t.metadata_bytes(), META_HEADER_BYTES);
    }

    #[test]
    fn adding_maps_grows_metadata_per_record() {
        let mut t = MmTemplate::new(1);
        for i in 0..100u64 {
            t.add_map(rw_vma(0x1000_0000 + i * 0x10000, 4)).unwrap();
        }
        assert_eq!(t.metadata_bytes(), META_HEADER_BYTES + 100 * META_PER_VMA);
    }

    #[test]
    fn example_readonly_map_is_recorded() {
        let mut t = MmTemplate::new(2);
        t.add_map(VmaDescriptor {
            va_start: 0x7FFF_4000,
            length: 4 * PAGE_SIZE,
            prot: Prot::read_only(),
            kind: MappingKind::Anonymous,
            private: true,
            zero_fill: false,
        })
        .unwrap();
        assert_eq!(t.vmas()[0].pages(), 4);
        assert_eq!(t.vmas()[0].end(), 0x7FFF_4000 + 0x4000);
    }

    #[test]
    fn overlap_and_misalignment_are_rejected() {
        let mut t = MmTemplate::new(3);
        t.add_map(rw_vma(0x1000, 4)).unwrap();
        assert!(matches!(
            t.add_map(rw_vma(0x3000, 4)),
            Err(TemplateError::Overlap { .. })
        ));
        assert!(matches!(
            t.add_map(VmaDescriptor { va_start: 0x1001, ..rw_vma(0x10000, 1) }),
            Err(TemplateError::Alignment { .. })
        ));
    }

    #[test]
    fn setup_pt_on_byte_addressable_pool_installs_valid_protected_entries() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 4);
        let mut t = MmTemplate::new(4);
        t.add_map(rw_vma(0x7FFF_4000, 4)).unwrap();
        t.setup_pt(0x7FFF_4000, 4 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        for i in 0..4u64 {
            let pte = t.pte(0x7FFF_4000 + i * PAGE_SIZE).unwrap();
            assert!(pte.valid && pte.write_protected);
            assert_eq!(pte.block.offset, offset + i * PAGE_SIZE);
            assert_eq!(pte.block.pool, PoolKind::Cxl);
        }
        assert_eq!(t.metadata_bytes(), META_HEADER_BYTES + META_PER_VMA + META_PER_PTE_RANGE);
    }

    #[test]
    fn setup_pt_on_fetch_pool_installs_invalid_entries() {
        let (pools, offset) = pools_with(PoolKind::Rdma, 4);
        let mut t = MmTemplate::new(5);
        t.add_map(rw_vma(0x2000_0000, 4)).unwrap();
        t.setup_pt(0x2000_0000, 4 * PAGE_SIZE, offset, pools.get(PoolKind::Rdma)).unwrap();
        for i in 0..4u64 {
            let pte = t.pte(0x2000_0000 + i * PAGE_SIZE).unwrap();
            assert!(!pte.valid);
        }
    }

    #[test]
    fn setup_pt_outside_vmas_or_pool_is_rejected() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 8);
        let mut t = MmTemplate::new(6);
        t.add_map(rw_vma(0x1000, 2)).unwrap();
        assert!(matches!(
            t.setup_pt(0x1000, 4 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)),
            Err(TemplateError::UnmappedRange { .. })
        ));
        let far = pools.get(PoolKind::Cxl).allocated_bytes();
        assert!(matches!(
            t.setup_pt(0x1000, 2 * PAGE_SIZE, far, pools.get(PoolKind::Cxl)),
            Err(TemplateError::BadOffset { .. })
        ));
    }

    #[test]
    fn attach_requires_complete_coverage() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 2);
        let mut t = MmTemplate::new(7);
        t.add_map(rw_vma(0x1000, 4)).unwrap();
        t.setup_pt(0x1000, 2 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        let t = Arc::new(t);
        let err = t
            .attach(1, AttachMode::Container, &FaultModelParams::default(), &mut ZeroRng)
            .unwrap_err();
        assert!(matches!(err, TemplateError::IncompleteTemplate { .. }));
    }

    #[test]
    fn zero_fill_vmas_need_no_entries_and_fault_minor() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 2);
        let mut t = MmTemplate::new(8);
        t.add_map(rw_vma(0x1000, 2)).unwrap();
        t.add_map(VmaDescriptor { zero_fill: true, ..rw_vma(0x10_0000, 4) }).unwrap();
        t.setup_pt(0x1000, 2 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        let t = Arc::new(t);
        let params = FaultModelParams::default();
        let (mut space, _) =
            t.attach(1, AttachMode::Container, &params, &mut ZeroRng).unwrap();
        let (out, lat) = space
            .handle_access(0x10_0000, true, 0.0, &pools, &mut ZeroRng, &params)
            .unwrap();
        assert_eq!(out, AccessOutcome::ZeroFill);
        assert_eq!(lat, params.minor_fault_cost_us);
        assert_eq!(space.counters.minor_faults, 1);
        assert_eq!(space.local_bytes(), PAGE_SIZE + t.metadata_bytes());
    }

    #[test]
    fn attach_cost_is_independent_of_template_size() {
        let params = FaultModelParams::default();
        let mut costs = Vec::new();
        for pages in [64u64, 4096] {
            let (pools, offset) = pools_with(PoolKind::Cxl, pages);
            let mut t = MmTemplate::new(pages);
            t.add_map(rw_vma(0x4000_0000, pages)).unwrap();
            t.setup_pt(0x4000_0000, pages * PAGE_SIZE, offset, pools.get(PoolKind::Cxl))
                .unwrap();
            let t = Arc::new(t);
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let (_, cost) = t.attach(1, AttachMode::Container, &params, &mut rng).unwrap();
            costs.push(cost);
        }
        assert_eq!(costs[0], costs[1]);
        assert!(costs[0] < 10.0);
    }

    #[test]
    fn vm_attach_costs_more_but_stays_bounded() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 4);
        let mut t = MmTemplate::new(9);
        t.add_map(rw_vma(0x1000, 4)).unwrap();
        t.setup_pt(0x1000, 4 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        let t = Arc::new(t);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (_, cost) =
            t.attach(1, AttachMode::Vm, &FaultModelParams::default(), &mut rng).unwrap();
        assert!(cost > 10.0 && cost < 40.0, "vm attach {cost} ms");
    }

    fn cxl_space(pages: u64) -> (PoolSet, Arc<MmTemplate>, AddressSpace) {
        let (pools, offset) = pools_with(PoolKind::Cxl, pages);
        let mut t = MmTemplate::new(10);
        t.add_map(rw_vma(0x1000_0000, pages)).unwrap();
        t.setup_pt(0x1000_0000, pages * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        let t = Arc::new(t);
        let (space, _) = t
            .attach(1, AttachMode::Container, &FaultModelParams::default(), &mut ZeroRng)
            .unwrap();
        (pools, t, space)
    }

    fn rdma_space(pages: u64) -> (PoolSet, Arc<MmTemplate>, AddressSpace) {
        let (pools, offset) = pools_with(PoolKind::Rdma, pages);
        let mut t = MmTemplate::new(11);
        t.add_map(rw_vma(0x1000_0000, pages)).unwrap();
        t.setup_pt(0x1000_0000, pages * PAGE_SIZE, offset, pools.get(PoolKind::Rdma)).unwrap();
        let t = Arc::new(t);
        let (space, _) = t
            .attach(1, AttachMode::Container, &FaultModelParams::default(), &mut ZeroRng)
            .unwrap();
        (pools, t, space)
    }

    #[test]
    fn reads_of_valid_shared_pages_are_direct_and_faultless() {
        let (pools, _t, mut space) = cxl_space(8);
        let params = FaultModelParams::default();
        let (out, lat) = space
            .handle_access(0x1000_0000, false, 0.0, &pools, &mut ZeroRng, &params)
            .unwrap();
        assert_eq!(out, AccessOutcome::Direct);
        assert!((lat - 0.6411).abs() < 1e-12);
        assert_eq!(space.counters, FaultCounters::default());
        assert_eq!(space.private_page_count(), 0);
    }

    #[test]
    fn write_then_write_costs_one_cow() {
        let (pools, _t, mut space) = cxl_space(8);
        let params = FaultModelParams::default();
        let (out1, _) = space
            .handle_access(0x1000_2000, true, 0.0, &pools, &mut ZeroRng, &params)
            .unwrap();
        let (out2, lat2) = space
            .handle_access(0x1000_2000, true, 0.0, &pools, &mut ZeroRng, &params)
            .unwrap();
        assert_eq!(out1, AccessOutcome::CowCopy);
        assert_eq!(out2, AccessOutcome::PrivateHit);
        assert_eq!(lat2, 0.0);
        assert_eq!(space.counters.cow_faults, 1);
        assert_eq!(space.local_bytes(), PAGE_SIZE + space.template().metadata_bytes());
    }

    #[test]
    fn each_distinct_fetched_page_is_one_major_fault() {
        let (pools, _t, mut space) = rdma_space(1000);
        let params = FaultModelParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for i in 0..1000u64 {
            let (out, _) = space
                .handle_access(0x1000_0000 + i * PAGE_SIZE, false, 0.0, &pools, &mut rng, &params)
                .unwrap();
            assert_eq!(out, AccessOutcome::MajorFaultFetch);
        }
        // Re-touch: everything is local now.
        for i in 0..1000u64 {
            let (out, _) = space
                .handle_access(0x1000_0000 + i * PAGE_SIZE, false, 0.0, &pools, &mut rng, &params)
                .unwrap();
            assert_eq!(out, AccessOutcome::PrivateHit);
        }
        assert_eq!(space.counters.major_faults, 1000);
        assert_eq!(
            space.local_bytes(),
            1000 * PAGE_SIZE + space.template().metadata_bytes()
        );
    }

    #[test]
    fn unmapped_access_is_a_segmentation_error() {
        let (pools, _t, mut space) = cxl_space(4);
        let params = FaultModelParams::default();
        let err = space
            .handle_access(0xdead_0000, false, 0.0, &pools, &mut ZeroRng, &params)
            .unwrap_err();
        assert!(matches!(err, TemplateError::Segmentation { .. }));
    }

    #[test]
    fn write_to_readonly_vma_segfaults() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 2);
        let mut t = MmTemplate::new(12);
        t.add_map(VmaDescriptor { prot: Prot::read_only(), ..rw_vma(0x1000, 2) }).unwrap();
        t.setup_pt(0x1000, 2 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        let t = Arc::new(t);
        let params = FaultModelParams::default();
        let (mut space, _) = t.attach(1, AttachMode::Container, &params, &mut ZeroRng).unwrap();
        let err =
            space.handle_access(0x1000, true, 0.0, &pools, &mut ZeroRng, &params).unwrap_err();
        assert!(matches!(err, TemplateError::Segmentation { .. }));
    }

    #[test]
    fn dump_run_length_encodes_contiguous_ranges() {
        let (pools, offset) = pools_with(PoolKind::Cxl, 64);
        let mut t = MmTemplate::new(13);
        t.add_map(rw_vma(0x1000_0000, 32)).unwrap();
        t.add_map(rw_vma(0x2000_0000, 32)).unwrap();
        t.setup_pt(0x1000_0000, 32 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
        t.setup_pt(0x2000_0000, 32 * PAGE_SIZE, offset + 32 * PAGE_SIZE, pools.get(PoolKind::Cxl))
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.dump_json()).unwrap();
        let ranges = v["pte_ranges"].as_array().unwrap();
        assert_eq!(ranges.len(), 2);
        assert_eq!(ranges[0]["pages"].as_u64().unwrap(), 32);
    }

    proptest! {
        // Writers never become visible to other spaces on the same template,
        // and the shared pool pages stay unmodified.
        #[test]
        fn cow_isolation_holds_across_spaces(
            ops in proptest::collection::vec((0usize..4, 0u64..32, prop::bool::ANY), 1..50)
        ) {
            let (pools, offset) = pools_with(PoolKind::Cxl, 32);
            let mut t = MmTemplate::new(100);
            t.add_map(rw_vma(0x1000_0000, 32)).unwrap();
            t.setup_pt(0x1000_0000, 32 * PAGE_SIZE, offset, pools.get(PoolKind::Cxl)).unwrap();
            let t = Arc::new(t);
            let params = FaultModelParams::default();
            let mut spaces: Vec<AddressSpace> = (0..4)
                .map(|pid| t.attach(pid, AttachMode::Container, &params, &mut ZeroRng).unwrap().0)
                .collect();
            let mut oracle_writes = vec![std::collections::BTreeMap::<u64, u64>::new(); 4];
            for (s, page, is_write) in ops {
                let va = 0x1000_0000 + page * PAGE_SIZE;
                spaces[s]
                    .handle_access(va, is_write, 0.0, &pools, &mut ZeroRng, &params)
                    .unwrap();
                if is_write {
                    *oracle_writes[s].entry(va).or_insert(0) += 1;
                }
            }
            for (i, space) in spaces.iter().enumerate() {
                for page in 0..32u64 {
                    let va = 0x1000_0000 + page * PAGE_SIZE;
                    let view = space.observe(va).unwrap();
                    match view {
                        ContentView::Private { writes, .. } => {
                            // A space sees exactly its own writes.
                            prop_assert_eq!(writes, *oracle_writes[i].get(&va).unwrap_or(&0));
                        }
                        ContentView::Shared { .. } => {
                            prop_assert_eq!(oracle_writes[i].get(&va), None);
                        }
                    }
                }
                // CoW accounting matches the distinct written pages. Reads
                // on this pool never allocate.
                prop_assert_eq!(space.counters.cow_faults, oracle_writes[i].len() as u64);
            }
            // Shared store untouched by any of it.
            prop_assert_eq!(pools.get(PoolKind::Cxl).pool_usage(), 32 * PAGE_SIZE);
        }

        // local_bytes always equals metadata plus page-size times distinct
        // private pages, checked against a replay oracle.
        #[test]
        fn local_bytes_matches_refcount_oracle(
            ops in proptest::collection::vec((0u64..64, prop::bool::ANY), 1..128)
        ) {
            let (pools, offset) = pools_with(PoolKind::Rdma, 64);
            let mut t = MmTemplate::new(101);
            t.add_map(rw_vma(0x1000_0000, 64)).unwrap();
            t.setup_pt(0x1000_0000, 64 * PAGE_SIZE, offset, pools.get(PoolKind::Rdma)).unwrap();
            let t = Arc::new(t);
            let params = FaultModelParams::default();
            let (mut space, _) =
                t.attach(7, AttachMode::Container, &params, &mut ZeroRng).unwrap();
            let mut touched = std::collections::BTreeSet::new();
            for (page, is_write) in ops {
                let va = 0x1000_0000 + page * PAGE_SIZE;
                space.handle_access(va, is_write, 0.0, &pools, &mut ZeroRng, &params).unwrap();
                touched.insert(va);
            }
            prop_assert_eq!(
                space.local_bytes(),
                touched.len() as u64 * PAGE_SIZE + t.metadata_bytes()
            );
            prop_assert_eq!(space.counters.major_faults, touched.len() as u64);
        }
    }
}
