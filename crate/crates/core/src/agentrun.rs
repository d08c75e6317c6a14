//! Agent fleet engine: runs VM-hosted agents to completion on a shared-core
//! node, with CPU overcommit as processor sharing and memory from the VM
//! cache ledgers.
//!
//! All agents start at time zero and alternate LLM waits (no CPU) with
//! CPU-bound tool or browser segments. Active segments progress at the
//! node-wide fair-share rate; each demand change invalidates projected
//! completion times, so completions are driven by generation-tagged check
//! events that go stale harmlessly. With browser sharing on, an agent's
//! browser segment charges only its tabs, and one browser process per group
//! adds demand while any member is in a browser segment. Reported startup
//! is zero: the run measures agent end-to-end time, not VM provisioning.

use std::collections::BTreeMap;

use crate::platform::PathKind;
use crate::report::{
    build_summary, round_us, verify_consistency, InvocationRecord, MemorySample, MetricsRecord,
    RunOutput,
};
use crate::runner::RunError;
use crate::scenario::{BrowserSharing, ScenarioConfig, ScenarioError, WorkloadSpec};
use crate::simcore::{ContentionTracker, EventQueue, WorkId};
use crate::vmext::{agent_ledger, BrowserGroups, NodeBaseCache, VmParams};
use crate::workload::{AgentProfile, Phase, PhaseKind};

#[derive(Debug)]
enum Event {
    /// An LLM wait segment ends.
    LlmEnd { agent: usize },
    /// The earliest projected CPU completion as of `generation`. Stale once
    /// the tracker's demand set changes; a fresh check is scheduled on
    /// every change, so stale pops are dropped.
    WorkCheck { id: WorkId, generation: u64 },
    /// Periodic memory sample.
    Tick,
}

struct AgentState {
    profile_idx: usize,
    /// 1-based fleet-wide id; doubles as the VM and group member id.
    gid: u64,
    phases: Vec<Phase>,
    next_phase: usize,
    done_us: Option<f64>,
    /// Guest OS plus anonymous memory while the VM lives.
    private_bytes: u64,
    /// Guest plus host page cache while the VM lives.
    cache_bytes: u64,
}

struct GroupLoad {
    /// Members currently inside a browser segment.
    active: u64,
    load_id: Option<WorkId>,
    overhead_demand: f64,
}

struct Fleet {
    profiles: Vec<AgentProfile>,
    agents: Vec<AgentState>,
    tracker: ContentionTracker,
    work_owner: BTreeMap<WorkId, usize>,
    /// Agents per shared browser; None runs one browser per agent.
    sharing_capacity: Option<usize>,
    /// Browser groups per profile index: agents share browsers only with
    /// their own kind, so one group has one overhead profile.
    groups: BTreeMap<usize, BrowserGroups>,
    group_loads: BTreeMap<(usize, u64), GroupLoad>,
    vm_params: VmParams,
    /// Node-wide shared base-file cache, fixed once ledgers are built.
    node_cache_bytes: u64,
    live: usize,
    records: Vec<MetricsRecord>,
    completions: usize,
}

impl Fleet {
    fn profile_of(&self, agent: usize) -> &AgentProfile {
        &self.profiles[self.agents[agent].profile_idx]
    }

    fn group_key(&self, agent: usize) -> Option<(usize, u64)> {
        let a = &self.agents[agent];
        let groups = self.groups.get(&a.profile_idx)?;
        groups.group_of(a.gid).map(|g| (a.profile_idx, g.group_id))
    }

    fn enter_browser(&mut self, agent: usize, now: f64) {
        let Some(key) = self.group_key(agent) else { return };
        let overhead = self.profile_of(agent).browser_overhead_demand;
        let load = self
            .group_loads
            .entry(key)
            .or_insert(GroupLoad { active: 0, load_id: None, overhead_demand: overhead });
        if load.active == 0 {
            load.load_id = Some(self.tracker.add_load(now, load.overhead_demand));
        }
        load.active += 1;
    }

    fn exit_browser(&mut self, agent: usize, now: f64) {
        let Some(key) = self.group_key(agent) else { return };
        let load = self.group_loads.get_mut(&key).expect("entered before exit");
        load.active -= 1;
        if load.active == 0 {
            let id = load.load_id.take().expect("load active");
            self.tracker.remove_load(now, id);
        }
    }

    /// Begin the agent's next phase, or finish the agent.
    fn start_next_phase(
        &mut self,
        agent: usize,
        now: f64,
        queue: &mut EventQueue<Event>,
    ) -> Result<(), RunError> {
        let a = &mut self.agents[agent];
        let Some(phase) = a.phases.get(a.next_phase).copied() else {
            a.done_us = Some(now);
            self.live -= 1;
            self.completions += 1;
            let gid = a.gid;
            let profile_idx = a.profile_idx;
            let profile_id = self.profiles[profile_idx].id.clone();
            if let Some(groups) = self.groups.get_mut(&profile_idx) {
                groups.remove(gid);
            }
            self.records.push(MetricsRecord::Invocation(InvocationRecord {
                time_ms: 0.0,
                function_id: profile_id,
                instance_id: gid,
                path: PathKind::Cold,
                startup_ms: 0.0,
                startup_breakdown: BTreeMap::new(),
                exec_ms: round_us(now / 1000.0),
                e2e_ms: round_us(now / 1000.0),
            }));
            return Ok(());
        };
        a.next_phase += 1;
        match phase.kind {
            PhaseKind::LlmWait => {
                queue.schedule(now + phase.wall_s * 1_000_000.0, Event::LlmEnd { agent })?;
            }
            PhaseKind::ToolCpu | PhaseKind::Browser => {
                let shared_browser =
                    phase.kind == PhaseKind::Browser && self.sharing_capacity.is_some();
                let demand = if shared_browser {
                    self.profile_of(agent).browser_tab_demand
                } else {
                    phase.cpu_demand
                };
                if phase.kind == PhaseKind::Browser {
                    self.enter_browser(agent, now);
                }
                let id = self.tracker.add_work(now, demand, phase.wall_s * 1_000_000.0);
                self.work_owner.insert(id, agent);
            }
        }
        Ok(())
    }

    /// A CPU segment owned by `agent` finished; leave the browser if that
    /// is what the segment used, then move on.
    fn complete_cpu_phase(
        &mut self,
        agent: usize,
        now: f64,
        queue: &mut EventQueue<Event>,
    ) -> Result<(), RunError> {
        let a = &self.agents[agent];
        let finished = a.phases[a.next_phase - 1];
        if finished.kind == PhaseKind::Browser {
            self.exit_browser(agent, now);
        }
        self.start_next_phase(agent, now, queue)
    }

    /// Keep exactly one live completion check: whoever bumps the tracker's
    /// generation schedules the next one.
    fn reschedule_check(
        &mut self,
        now: f64,
        queue: &mut EventQueue<Event>,
    ) -> Result<(), RunError> {
        let next = self
            .tracker
            .projected_completions(now)
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((id, at)) = next {
            queue.schedule(at.max(now), Event::WorkCheck {
                id,
                generation: self.tracker.generation(),
            })?;
        }
        Ok(())
    }

    fn sample_memory(&mut self, now: f64) {
        let mut private = 0u64;
        let mut cache = 0u64;
        for a in &self.agents {
            if a.done_us.is_none() {
                private += a.private_bytes;
                cache += a.cache_bytes;
            }
        }
        if self.live > 0 {
            cache += self.node_cache_bytes;
        }
        let browser = match self.sharing_capacity {
            Some(_) => self
                .groups
                .values()
                .map(|g| g.total_memory_bytes(&self.vm_params))
                .sum::<u64>(),
            None => {
                self.agents
                    .iter()
                    .filter(|a| {
                        a.done_us.is_none() && self.profiles[a.profile_idx].browser_required
                    })
                    .count() as u64
                    * self.vm_params.browser_bytes
            }
        };
        self.records.push(MetricsRecord::Memory(MemorySample {
            time_ms: round_us(now / 1000.0),
            private_bytes: private,
            pool_bytes: 0,
            page_cache_bytes: cache,
            sandbox_overhead_bytes: browser,
        }));
    }

    fn handle(
        &mut self,
        now: f64,
        event: Event,
        queue: &mut EventQueue<Event>,
    ) -> Result<(), RunError> {
        let generation_before = self.tracker.generation();
        match event {
            Event::LlmEnd { agent } => {
                self.start_next_phase(agent, now, queue)?;
            }
            Event::WorkCheck { id, generation } => {
                if generation != self.tracker.generation() {
                    return Ok(());
                }
                // The projection was made under this generation and nothing
                // changed since, so `id` completes exactly now. Removing it
                // advances the tracker, which keeps the sweep below honest.
                let owner = self.work_owner.remove(&id).expect("work has an owner");
                self.tracker.remove_work(now, id);
                self.complete_cpu_phase(owner, now, queue)?;
                // Anything else that hit zero at the same instant.
                loop {
                    let due = self
                        .tracker
                        .projected_completions(now)
                        .into_iter()
                        .find(|(_, at)| *at <= now + 1e-6);
                    let Some((done_id, _)) = due else { break };
                    let owner = self.work_owner.remove(&done_id).expect("work has an owner");
                    self.tracker.remove_work(now, done_id);
                    self.complete_cpu_phase(owner, now, queue)?;
                }
            }
            Event::Tick => {
                self.sample_memory(now);
                if self.live > 0 {
                    queue.schedule(now + 1_000_000.0, Event::Tick)?;
                }
            }
        }
        if self.tracker.generation() != generation_before {
            self.reschedule_check(now, queue)?;
        }
        Ok(())
    }
}

/// Run an agent fleet scenario to completion.
///
/// The warmup window does not apply here: agents all start at time zero,
/// so the summary counts every run.
pub fn run_agents(cfg: &ScenarioConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let WorkloadSpec::Agents { fleet } = &cfg.workload else {
        return Err(ScenarioError::Invalid(
            "function workloads run through the function engine, not the agent engine".to_string(),
        )
        .into());
    };

    let catalog = cfg.resolve_agents();
    let mut profiles: Vec<AgentProfile> = Vec::new();
    let mut profile_idx_by_id: BTreeMap<String, usize> = BTreeMap::new();
    for entry in fleet {
        if !profile_idx_by_id.contains_key(&entry.agent_id) {
            let p = catalog
                .iter()
                .find(|a| a.id == entry.agent_id)
                .ok_or_else(|| {
                    ScenarioError::Invalid(format!("unknown agent id {:?}", entry.agent_id))
                })?
                .clone();
            profile_idx_by_id.insert(entry.agent_id.clone(), profiles.len());
            profiles.push(p);
        }
    }

    let sharing_capacity = match cfg.vm.browser_sharing {
        BrowserSharing::Off => None,
        BrowserSharing::Capacity { capacity } => Some(capacity as usize),
    };
    let vm_params = cfg.vm.params;
    let mode = cfg.vm.storage_mode;

    let mut agents: Vec<AgentState> = Vec::new();
    let mut groups: BTreeMap<usize, BrowserGroups> = BTreeMap::new();
    let mut node = NodeBaseCache::new(vm_params.base_device_bytes);
    let mut gid = 0u64;
    for entry in fleet {
        let profile_idx = profile_idx_by_id[&entry.agent_id];
        let profile = &profiles[profile_idx];
        for _ in 0..entry.count {
            gid += 1;
            let ledger = agent_ledger(profile, gid, mode, &mut node);
            if profile.browser_required {
                if let Some(capacity) = sharing_capacity {
                    groups
                        .entry(profile_idx)
                        .or_insert_with(|| BrowserGroups::new(capacity))
                        .assign(gid);
                }
            }
            agents.push(AgentState {
                profile_idx,
                gid,
                phases: profile.phase_layout(),
                next_phase: 0,
                done_us: None,
                private_bytes: vm_params.guest_os_bytes + ledger.guest_anon_bytes(),
                cache_bytes: ledger.guest_page_cache_bytes() + ledger.host_page_cache_bytes(),
            });
        }
    }

    let live = agents.len();
    let mut fleet_state = Fleet {
        profiles,
        agents,
        tracker: ContentionTracker::new(cfg.node.cores),
        work_owner: BTreeMap::new(),
        sharing_capacity,
        groups,
        group_loads: BTreeMap::new(),
        vm_params,
        node_cache_bytes: node.resident_bytes(),
        live,
        records: Vec::new(),
        completions: 0,
    };

    let mut queue = EventQueue::new();
    fleet_state.sample_memory(0.0);
    for agent in 0..fleet_state.agents.len() {
        fleet_state.start_next_phase(agent, 0.0, &mut queue)?;
    }
    fleet_state.reschedule_check(0.0, &mut queue)?;
    queue.schedule(1_000_000.0, Event::Tick)?;

    while let Some(ev) = queue.pop() {
        let now = ev.time;
        fleet_state.handle(now, ev.payload, &mut queue)?;
    }

    assert_eq!(
        fleet_state.completions,
        fleet_state.agents.len(),
        "every agent must finish exactly once"
    );
    assert!(fleet_state.work_owner.is_empty(), "no orphaned CPU work");

    let duration_s = fleet_state
        .agents
        .iter()
        .map(|a| a.done_us.expect("all done") / 1_000_000.0)
        .fold(0.0, f64::max);
    let summary = build_summary(&cfg.name, cfg.seed, duration_s, 0.0, &fleet_state.records, BTreeMap::new())?;
    verify_consistency(&summary, &fleet_state.records)?;
    Ok(RunOutput { records: fleet_state.records, summary })
}
