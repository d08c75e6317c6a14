//! Shared memory pools with content-addressed, deduplicated page storage.
//!
//! A pool is an append-only bump allocator of 4 KiB pages. Inserting content
//! that is already present returns the existing block and bumps its
//! reference count; nothing is ever freed or compacted, so offsets are
//! stable for the lifetime of a scenario. Three pool kinds model three
//! placements: byte-addressable CXL memory read in place, RDMA memory
//! fetched page-at-a-time on fault, and plain local DRAM.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Page granularity of every pool and template in the simulator.
pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("pool {kind:?} is full: {used} + {requested} bytes exceeds capacity {capacity}")]
    PoolFull { kind: PoolKind, used: u64, requested: u64, capacity: u64 },
    #[error("access kind {access:?} is not supported on pool {kind:?}")]
    UnsupportedAccess { kind: PoolKind, access: AccessKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoolKind {
    Cxl,
    Rdma,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    /// Load served directly from the pool medium (valid PTE).
    DirectRead,
    /// Page copied into local memory on first touch (invalid PTE).
    LazyFetch,
}

/// Location of one deduplicated block inside a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub pool: PoolKind,
    /// Byte offset of the first page; always page-aligned.
    pub offset: u64,
}

/// Load-dependent tail inflation for fetch latency. Flat at 1 below the
/// knee, then linear up to `max_multiplier` at load 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailModel {
    pub knee: f64,
    pub max_multiplier: f64,
}

impl Default for TailModel {
    fn default() -> Self {
        TailModel { knee: 0.5, max_multiplier: 5.0 }
    }
}

impl TailModel {
    pub fn multiplier(&self, load: f64) -> f64 {
        let load = load.clamp(0.0, 1.0);
        if load <= self.knee {
            1.0
        } else {
            1.0 + (load - self.knee) / (1.0 - self.knee) * (self.max_multiplier - 1.0)
        }
    }
}

/// Latency constants for one pool medium.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyParams {
    /// Per-access read latency for direct reads, nanoseconds.
    pub read_latency_ns: f64,
    /// Transfer cost of one page fetch, microseconds.
    pub fetch_latency_us: f64,
    /// Kernel-side fault handling cost per fetch, microseconds.
    pub fault_handling_us: f64,
    pub tail: TailModel,
}

impl LatencyParams {
    /// Byte-addressable device measured at 641.1 ns per read.
    pub fn cxl_default() -> Self {
        LatencyParams {
            read_latency_ns: 641.1,
            fetch_latency_us: 0.0,
            fault_handling_us: 0.0,
            tail: TailModel::default(),
        }
    }

    /// One-sided RDMA: 6 us page fetch plus 4 us of fault handling.
    pub fn rdma_default() -> Self {
        LatencyParams {
            read_latency_ns: 0.0,
            fetch_latency_us: 6.0,
            fault_handling_us: 4.0,
            tail: TailModel::default(),
        }
    }

    pub fn local_default() -> Self {
        LatencyParams {
            read_latency_ns: 0.0,
            fetch_latency_us: 0.0,
            fault_handling_us: 0.0,
            tail: TailModel::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct BlockEntry {
    block: BlockRef,
    pages: u64,
    refcount: u64,
}

/// One pool: bump allocator plus hash -> block index.
#[derive(Debug)]
pub struct PoolStore {
    kind: PoolKind,
    capacity_bytes: u64,
    latency: LatencyParams,
    blocks: BTreeMap<u128, BlockEntry>,
    next_offset: u64,
}

impl PoolStore {
    pub fn new(kind: PoolKind, capacity_bytes: u64, latency: LatencyParams) -> Self {
        PoolStore { kind, capacity_bytes, latency, blocks: BTreeMap::new(), next_offset: 0 }
    }

    pub fn with_defaults(kind: PoolKind, capacity_bytes: u64) -> Self {
        let latency = match kind {
            PoolKind::Cxl => LatencyParams::cxl_default(),
            PoolKind::Rdma => LatencyParams::rdma_default(),
            PoolKind::Local => LatencyParams::local_default(),
        };
        Self::new(kind, capacity_bytes, latency)
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn latency(&self) -> &LatencyParams {
        &self.latency
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Bytes handed out by the bump pointer so far; offsets below this are
    /// valid targets for page-table setup.
    pub fn allocated_bytes(&self) -> u64 {
        self.next_offset
    }

    /// Insert `pages` consecutive pages of content identified by `hash`.
    /// Re-inserting an existing hash returns the stored block and only bumps
    /// its refcount.
    pub fn dedup_insert(&mut self, hash: u128, pages: u64) -> Result<BlockRef, PoolError> {
        debug_assert!(pages > 0);
        if let Some(entry) = self.blocks.get_mut(&hash) {
            entry.refcount += 1;
            return Ok(entry.block);
        }
        let bytes = pages * PAGE_SIZE;
        if self.next_offset + bytes > self.capacity_bytes {
            return Err(PoolError::PoolFull {
                kind: self.kind,
                used: self.next_offset,
                requested: bytes,
                capacity: self.capacity_bytes,
            });
        }
        let block = BlockRef { pool: self.kind, offset: self.next_offset };
        self.next_offset += bytes;
        self.blocks.insert(hash, BlockEntry { block, pages, refcount: 1 });
        Ok(block)
    }

    /// Total bytes of distinct stored pages: refcounts do not change this.
    pub fn pool_usage(&self) -> u64 {
        self.blocks.values().map(|e| e.pages * PAGE_SIZE).sum()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn refcount(&self, hash: u128) -> u64 {
        self.blocks.get(&hash).map(|e| e.refcount).unwrap_or(0)
    }

    /// Latency of one access, in microseconds. Direct reads are only
    /// supported where the medium is byte-addressable; lazy fetch pays the
    /// fault plus the transfer scaled by the load-dependent tail. The rng
    /// argument keeps the sampling hook in the signature; the default model
    /// is noise-free so the anchors stay exact.
    pub fn sample_access_latency(
        &self,
        access: AccessKind,
        current_load: f64,
        _rng: &mut impl RngCore,
    ) -> Result<f64, PoolError> {
        match (self.kind, access) {
            (PoolKind::Rdma, AccessKind::DirectRead) => {
                Err(PoolError::UnsupportedAccess { kind: self.kind, access })
            }
            (_, AccessKind::DirectRead) => Ok(self.latency.read_latency_ns / 1000.0),
            (_, AccessKind::LazyFetch) => {
                let tail = self.latency.tail.multiplier(current_load);
                Ok(self.latency.fault_handling_us + self.latency.fetch_latency_us * tail)
            }
        }
    }

    /// JSON manifest of the pool contents, keyed by content hash.
    pub fn manifest_json(&self) -> String {
        #[derive(Serialize)]
        struct Manifest<'a> {
            kind: PoolKind,
            capacity_bytes: u64,
            allocated_bytes: u64,
            usage_bytes: u64,
            blocks: BTreeMap<String, &'a BlockEntry>,
        }
        let blocks =
            self.blocks.iter().map(|(h, e)| (format!("{h:032x}"), e)).collect::<BTreeMap<_, _>>();
        let m = Manifest {
            kind: self.kind,
            capacity_bytes: self.capacity_bytes,
            allocated_bytes: self.next_offset,
            usage_bytes: self.pool_usage(),
            blocks,
        };
        serde_json::to_string_pretty(&m).expect("manifest serialization")
    }
}

/// The set of pools available to one scenario.
#[derive(Debug)]
pub struct PoolSet {
    pools: BTreeMap<PoolKind, PoolStore>,
}

impl PoolSet {
    pub fn new(pools: Vec<PoolStore>) -> Self {
        let pools = pools.into_iter().map(|p| (p.kind(), p)).collect();
        PoolSet { pools }
    }

    pub fn with_default_capacity(capacity_bytes: u64) -> Self {
        Self::new(vec![
            PoolStore::with_defaults(PoolKind::Cxl, capacity_bytes),
            PoolStore::with_defaults(PoolKind::Rdma, capacity_bytes),
            PoolStore::with_defaults(PoolKind::Local, capacity_bytes),
        ])
    }

    pub fn get(&self, kind: PoolKind) -> &PoolStore {
        &self.pools[&kind]
    }

    pub fn get_mut(&mut self, kind: PoolKind) -> &mut PoolStore {
        self.pools.get_mut(&kind).expect("pool kind present")
    }
}
