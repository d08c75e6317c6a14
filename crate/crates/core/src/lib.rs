//! Deterministic desk-scale simulator for a serverless platform that
//! restores sandboxes from memory templates held in shared memory pools.
//!
//! The crate layers as follows, bottom up:
//!
//! - [`simcore`]: event queue, seeded RNG streams, CPU contention.
//! - [`mempool`]: content-addressed page pools with per-tier latency.
//! - [`snapshot`] and [`mmtemplate`]: snapshot images and the
//!   metadata-only address-space templates cut from them.
//! - [`sandbox`]: sandbox lifecycle costs (create, clean, repurpose).
//! - [`workload`], [`execmodel`], [`costmodel`]: function and agent
//!   catalogs, arrival generators, execution-time and price models.
//! - [`platform`]: the restore-policy engine tying the above together.
//! - [`vmext`]: VM memory ledgers, shared browsers, pmem page caches.
//! - [`scenario`], [`runner`], [`agentrun`], [`report`]: configuration,
//!   the two simulation drivers, and run artifacts.

pub mod agentrun;
pub mod costmodel;
pub mod execmodel;
pub mod mempool;
pub mod mmtemplate;
pub mod platform;
pub mod report;
pub mod runner;
pub mod sandbox;
pub mod scenario;
pub mod simcore;
pub mod snapshot;
pub mod vmext;
pub mod workload;
