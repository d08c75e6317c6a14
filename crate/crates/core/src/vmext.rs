//! VM-mode memory extensions.
//!
//! Covers what container-mode accounting misses about microVMs: the same
//! file bytes cached once by the guest kernel and again by the host under
//! para-virtualized block storage, the pmem-plus-union-filesystem mode that
//! removes both copies for shared base files, and browser instances shared
//! by several agents instead of one browser per agent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::platform::{criu_copy_cost_ms, CriuParams};
use crate::workload::AgentProfile;

pub const MIB: u64 = 1 << 20;

/// How a VM's disks are attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    /// Para-virtualized block device: every file read lands in the guest
    /// page cache and again in the host page cache.
    #[default]
    BlockdevBaseline,
    /// Read-only base device mapped cache-bypassing into the guest, plus a
    /// private writable device opened with direct I/O on the host.
    PmemUnionfs,
}

/// What kind of file a read touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileClass {
    /// Read-only content shared by every VM (runtime, packages).
    BaseShared,
    /// Per-VM writable or private content.
    WritablePrivate,
}

/// Fixed memory constants for VM deployments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmParams {
    /// Guest kernel and system daemons, per VM.
    pub guest_os_bytes: u64,
    /// One browser instance.
    pub browser_bytes: u64,
    /// Marginal cost of one more agent's tabs in a shared browser.
    pub browser_tab_bytes: u64,
    /// Agents per shared browser instance.
    pub browser_capacity: usize,
    /// Size of the read-only base device; node-wide base cache can never
    /// exceed it.
    pub base_device_bytes: u64,
    /// Full-copy restore of a VM memory image never beats this floor.
    pub vanilla_restore_floor_ms: f64,
}

impl Default for VmParams {
    fn default() -> Self {
        VmParams {
            guest_os_bytes: 150 * MIB,
            browser_bytes: 700 * MIB,
            browser_tab_bytes: 20 * MIB,
            browser_capacity: 10,
            base_device_bytes: 2048 * MIB,
            vanilla_restore_floor_ms: 700.0,
        }
    }
}

/// Memory deltas from one file read, by where the bytes got cached.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CacheDelta {
    pub guest_bytes: u64,
    pub host_bytes: u64,
    /// Growth of the node-wide shared base cache (pmem mode only).
    pub node_bytes: u64,
}

/// Node-wide cache of base-device files under pmem mode: one copy serves
/// every VM. Per file the cached extent only grows, and the total is capped
/// by the device size.
#[derive(Debug, Default)]
pub struct NodeBaseCache {
    device_bytes: u64,
    files: BTreeMap<String, u64>,
}

impl NodeBaseCache {
    pub fn new(device_bytes: u64) -> Self {
        NodeBaseCache { device_bytes, files: BTreeMap::new() }
    }

    pub fn resident_bytes(&self) -> u64 {
        self.files.values().sum()
    }

    /// Extend `file`'s cached extent to at least `bytes`. Returns the actual
    /// growth after the device-size cap.
    fn note_read(&mut self, file: &str, bytes: u64) -> u64 {
        let current = self.files.get(file).copied().unwrap_or(0);
        if bytes <= current {
            return 0;
        }
        let want = bytes - current;
        let room = self.device_bytes.saturating_sub(self.resident_bytes());
        let grow = want.min(room);
        if grow > 0 {
            self.files.insert(file.to_string(), current + grow);
        }
        grow
    }
}

/// Per-VM memory ledger: anonymous memory plus per-file cache extents on
/// both sides of the virtualization boundary.
#[derive(Debug)]
pub struct VmMemoryLedger {
    pub vm_id: u64,
    pub storage_mode: StorageMode,
    guest_anon_bytes: u64,
    guest_cache: BTreeMap<String, u64>,
    host_cache: BTreeMap<String, u64>,
}

impl VmMemoryLedger {
    pub fn new(vm_id: u64, storage_mode: StorageMode) -> Self {
        VmMemoryLedger {
            vm_id,
            storage_mode,
            guest_anon_bytes: 0,
            guest_cache: BTreeMap::new(),
            host_cache: BTreeMap::new(),
        }
    }

    pub fn add_anon(&mut self, bytes: u64) {
        self.guest_anon_bytes += bytes;
    }

    pub fn guest_anon_bytes(&self) -> u64 {
        self.guest_anon_bytes
    }

    pub fn guest_page_cache_bytes(&self) -> u64 {
        self.guest_cache.values().sum()
    }

    pub fn host_page_cache_bytes(&self) -> u64 {
        self.host_cache.values().sum()
    }

    /// Everything this VM pins on the node, excluding node-shared caches.
    pub fn vm_total_bytes(&self, params: &VmParams) -> u64 {
        params.guest_os_bytes
            + self.guest_anon_bytes
            + self.guest_page_cache_bytes()
            + self.host_page_cache_bytes()
    }

    fn grow_extent(map: &mut BTreeMap<String, u64>, file: &str, bytes: u64) -> u64 {
        let current = map.get(file).copied().unwrap_or(0);
        if bytes <= current {
            return 0;
        }
        map.insert(file.to_string(), bytes);
        bytes - current
    }
}

/// Account one file read against a VM's ledger and, under pmem mode, the
/// node-wide base cache. Reads are idempotent per (ledger, file) up to the
/// largest extent seen; only growth is charged.
pub fn account_file_read(
    ledger: &mut VmMemoryLedger,
    node: &mut NodeBaseCache,
    class: FileClass,
    file: &str,
    bytes: u64,
) -> CacheDelta {
    match (ledger.storage_mode, class) {
        (StorageMode::BlockdevBaseline, _) => {
            // Block device: the guest caches the file, and servicing the
            // virtio requests leaves a second copy in the host cache.
            let g = VmMemoryLedger::grow_extent(&mut ledger.guest_cache, file, bytes);
            let h = VmMemoryLedger::grow_extent(&mut ledger.host_cache, file, bytes);
            CacheDelta { guest_bytes: g, host_bytes: h, node_bytes: 0 }
        }
        (StorageMode::PmemUnionfs, FileClass::BaseShared) => {
            // The base device is mapped cache-bypassing: the guest keeps no
            // page-cache copy, and the host-side mapping is one per node.
            let n = node.note_read(file, bytes);
            CacheDelta { guest_bytes: 0, host_bytes: 0, node_bytes: n }
        }
        (StorageMode::PmemUnionfs, FileClass::WritablePrivate) => {
            // Writable device is opened with direct I/O: guest cache only.
            let g = VmMemoryLedger::grow_extent(&mut ledger.guest_cache, file, bytes);
            CacheDelta { guest_bytes: g, host_bytes: 0, node_bytes: 0 }
        }
    }
}

/// One shared browser and the agents running tabs in it.
#[derive(Debug, Clone, Serialize)]
pub struct BrowserGroup {
    pub group_id: u64,
    pub capacity: usize,
    pub members: Vec<u64>,
}

impl BrowserGroup {
    /// Browser memory: one instance plus tab state per extra member.
    pub fn memory_bytes(&self, params: &VmParams) -> u64 {
        if self.members.is_empty() {
            return 0;
        }
        params.browser_bytes + params.browser_tab_bytes * (self.members.len() as u64 - 1)
    }
}

/// First-fit assignment of agents to shared browsers. Capacity 1 degrades
/// to one browser per agent (sharing off).
#[derive(Debug)]
pub struct BrowserGroups {
    capacity: usize,
    groups: Vec<BrowserGroup>,
    next_id: u64,
}

impl BrowserGroups {
    pub fn new(capacity: usize) -> Self {
        BrowserGroups { capacity: capacity.max(1), groups: Vec::new(), next_id: 1 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Join the first group with a free slot, else open a new one.
    pub fn assign(&mut self, agent_id: u64) -> u64 {
        debug_assert!(self.group_of(agent_id).is_none(), "agent {agent_id} already grouped");
        if let Some(g) = self.groups.iter_mut().find(|g| g.members.len() < g.capacity) {
            g.members.push(agent_id);
            return g.group_id;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.groups.push(BrowserGroup { group_id: id, capacity: self.capacity, members: vec![agent_id] });
        id
    }

    pub fn remove(&mut self, agent_id: u64) {
        for g in &mut self.groups {
            g.members.retain(|&m| m != agent_id);
        }
        self.groups.retain(|g| !g.members.is_empty());
    }

    pub fn group_of(&self, agent_id: u64) -> Option<&BrowserGroup> {
        self.groups.iter().find(|g| g.members.contains(&agent_id))
    }

    pub fn groups(&self) -> &[BrowserGroup] {
        &self.groups
    }

    pub fn total_memory_bytes(&self, params: &VmParams) -> u64 {
        self.groups.iter().map(|g| g.memory_bytes(params)).sum()
    }
}

/// An agent VM's anonymous/cache decomposition. The profile's measured
/// footprint was taken under the baseline storage mode, so it includes the
/// duplicated caches: anon = footprint - 2 * (base + private).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentMemoryModel {
    pub anon_bytes: u64,
    pub base_cache_bytes: u64,
    pub writable_cache_bytes: u64,
}

pub fn agent_memory_model(agent: &AgentProfile) -> AgentMemoryModel {
    let base = (agent.base_file_mb * MIB as f64).round() as u64;
    let writable = (agent.private_file_mb * MIB as f64).round() as u64;
    let footprint = (agent.memory_mb * MIB as f64).round() as u64;
    let anon = footprint.saturating_sub(2 * (base + writable));
    AgentMemoryModel { anon_bytes: anon, base_cache_bytes: base, writable_cache_bytes: writable }
}

/// Build and replay an agent's file reads into a fresh ledger.
pub fn agent_ledger(
    agent: &AgentProfile,
    vm_id: u64,
    mode: StorageMode,
    node: &mut NodeBaseCache,
) -> VmMemoryLedger {
    let model = agent_memory_model(agent);
    let mut ledger = VmMemoryLedger::new(vm_id, mode);
    ledger.add_anon(model.anon_bytes);
    account_file_read(&mut ledger, node, FileClass::BaseShared, "base", model.base_cache_bytes);
    account_file_read(
        &mut ledger,
        node,
        FileClass::WritablePrivate,
        &format!("writable/{vm_id}"),
        model.writable_cache_bytes,
    );
    ledger
}

/// Peak node memory attributable to one agent VM, excluding node-shared
/// base cache and any browser sharing (one full browser instance when the
/// agent needs one).
pub fn agent_peak_bytes(agent: &AgentProfile, mode: StorageMode, params: &VmParams) -> u64 {
    let mut node = NodeBaseCache::new(params.base_device_bytes);
    let ledger = agent_ledger(agent, 0, mode, &mut node);
    let browser = if agent.browser_required { params.browser_bytes } else { 0 };
    ledger.vm_total_bytes(params) + browser
}

/// Fractional peak-memory saving of pmem mode over the baseline for one
/// agent VM.
pub fn pmem_reduction(agent: &AgentProfile, params: &VmParams) -> f64 {
    let baseline = agent_peak_bytes(agent, StorageMode::BlockdevBaseline, params) as f64;
    let pmem = agent_peak_bytes(agent, StorageMode::PmemUnionfs, params) as f64;
    (baseline - pmem) / baseline
}

/// Restore cost of copying a whole VM memory image through the hypervisor,
/// floored at the measured minimum for full-copy VM restores.
pub fn vanilla_vm_restore_ms(image_bytes: u64, criu: &CriuParams, params: &VmParams) -> f64 {
    criu_copy_cost_ms(image_bytes, criu).max(params.vanilla_restore_floor_ms)
}
