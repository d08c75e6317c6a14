//! Execution-time model.
//!
//! A run's wall time is a lognormal sample around the function's base run
//! time, stretched by CPU contention, plus a placement penalty that depends
//! on where the snapshot pages live while the function executes. Runs over
//! byte-addressable memory pay per re-read access; runs over a fetch-based
//! medium pay per page brought in on fault.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mempool::{LatencyParams, PoolKind};
use crate::mmtemplate::FaultModelParams;
use crate::simcore::lognormal_median;
use crate::workload::FunctionProfile;

/// Knobs for the placement penalty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecParams {
    /// Mean number of device read accesses a resident page absorbs during one
    /// run. Byte-granular loads hit the device directly, so this multiplies
    /// the per-read latency rather than a page-transfer cost.
    pub cxl_accesses_per_page: f64,
    /// Concurrent lazy-fetch streams that saturate the transport. Load for
    /// the tail model is `concurrent / rdma_saturation`, capped at 1.
    pub rdma_saturation: f64,
    /// Userfaultfd round-trip cost per page faulted from a snapshot file,
    /// microseconds. Applies to the first run after a lazy restore.
    pub uffd_page_cost_us: f64,
    /// Fraction of the touched set a prefetching lazy restore maps ahead of
    /// the run, so only the remainder faults.
    pub faasnap_prefetch_fraction: f64,
}

impl Default for ExecParams {
    fn default() -> Self {
        ExecParams {
            cxl_accesses_per_page: 4.2115,
            rdma_saturation: 24.0,
            uffd_page_cost_us: 4.0,
            faasnap_prefetch_fraction: 0.7,
        }
    }
}

/// Transport load from the number of concurrently executing lazy-fetch users.
pub fn rdma_load(concurrent: u64, params: &ExecParams) -> f64 {
    if params.rdma_saturation <= 0.0 {
        return 1.0;
    }
    (concurrent as f64 / params.rdma_saturation).clamp(0.0, 1.0)
}

/// Extra wall time one run pays for its memory placement, milliseconds.
///
/// Placement on local DRAM costs nothing. Byte-addressable remote memory
/// charges each read its device latency (scaled by the per-page access count
/// and the profile's re-access factor) and each first write a copy-on-write
/// page copy. Fetch-based remote memory charges every touched page one fault:
/// kernel handling plus a transfer whose cost inflates with transport load.
pub fn placement_delta_ms(
    profile: &FunctionProfile,
    kind: PoolKind,
    latency: &LatencyParams,
    load: f64,
    faults: &FaultModelParams,
    params: &ExecParams,
) -> f64 {
    let reads = profile.read_pages() as f64;
    let writes = profile.written_pages() as f64;
    match kind {
        PoolKind::Local => 0.0,
        PoolKind::Cxl => {
            let per_read_us = params.cxl_accesses_per_page * latency.read_latency_ns / 1000.0;
            let read_us = reads * profile.reaccess_factor * per_read_us;
            let write_us = writes * faults.cow_copy_cost_us;
            (read_us + write_us) / 1000.0
        }
        PoolKind::Rdma => {
            let per_page_us =
                latency.fault_handling_us + latency.fetch_latency_us * latency.tail.multiplier(load);
            (reads + writes) * per_page_us / 1000.0
        }
    }
}

/// Placement penalty for a warm re-run, milliseconds. Pages written on the
/// first run are private copies by now and fetch-based pages are resident,
/// so only direct reads against byte-addressable memory still cost anything.
pub fn warm_delta_ms(
    profile: &FunctionProfile,
    kind: PoolKind,
    latency: &LatencyParams,
    params: &ExecParams,
) -> f64 {
    match kind {
        PoolKind::Cxl => {
            let per_read_us = params.cxl_accesses_per_page * latency.read_latency_ns / 1000.0;
            profile.read_pages() as f64 * profile.reaccess_factor * per_read_us / 1000.0
        }
        PoolKind::Rdma | PoolKind::Local => 0.0,
    }
}

/// First-run inflation after a lazy restore from a snapshot file: every
/// touched page not covered by prefetch takes a userfaultfd round trip.
pub fn uffd_inflation_ms(touched_pages: u64, prefetch_fraction: f64, params: &ExecParams) -> f64 {
    let frac = prefetch_fraction.clamp(0.0, 1.0);
    // Snap to nanopage precision so exact products (9000 * 0.3) do not
    // ceil one page too far.
    let exact = (touched_pages as f64 * (1.0 - frac) * 1e9).round() / 1e9;
    exact.ceil() * params.uffd_page_cost_us / 1000.0
}

/// Sample one run's wall time: lognormal around the base, stretched by the
/// CPU slowdown factor, plus whatever placement penalty the caller computed.
pub fn sample_exec_ms(
    profile: &FunctionProfile,
    delta_ms: f64,
    slowdown: f64,
    rng: &mut impl Rng,
) -> f64 {
    lognormal_median(rng, profile.base_exec_ms, profile.exec_sigma) * slowdown + delta_ms
}
