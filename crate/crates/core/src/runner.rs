//! The serverless run loop: replays an arrival trace against a `Platform`
//! on the event queue and collects the metrics stream.
//!
//! Time handling: arrivals, setup completions, and exec completions are
//! queue events in microseconds. Startup latencies come from the platform's
//! plan, exec latencies from the per-function distribution plus placement
//! delta, stretched by CPU oversubscription at exec start. A 1 Hz
//! maintenance tick expires keep-alive instances and samples memory.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::execmodel::sample_exec_ms;
use crate::platform::{PathKind, Platform, PlatformError, RestorePolicy};
use crate::mempool::PoolKind;
use crate::report::{
    build_summary, round_us, verify_consistency, InvocationRecord, MemorySample, MetricsRecord,
    ReportError, RunOutput,
};
use crate::scenario::{ScenarioConfig, ScenarioError, WorkloadSpec};
use crate::simcore::{CpuModel, EventQueue, RngHub, SimError};
use crate::workload::{gen_w1, gen_w2, load_trace, FunctionProfile, InvocationTrace, WorkloadError};

#[derive(Debug, Error)]
pub enum RunError {
    /// Configuration-stage failure; the CLI exits with its config code.
    #[error(transparent)]
    Config(#[from] ScenarioError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug)]
enum Event {
    Arrival { function_id: String },
    SetupDone { instance_id: u64 },
    ExecDone { instance_id: u64 },
    MaintenanceTick,
    PurgeDone { sandbox_id: u64 },
}

/// An invocation between arrival and completion.
struct Pending {
    arrival_us: f64,
    function_id: String,
    path: PathKind,
    startup_ms: f64,
    breakdown: BTreeMap<String, f64>,
    inflation_ms: f64,
    warm: bool,
    index: u64,
    exec_ms: f64,
}

struct Engine {
    platform: Platform,
    cpu: CpuModel,
    profiles: BTreeMap<String, FunctionProfile>,
    hub: RngHub,
    rng_platform: ChaCha12Rng,
    running: u64,
    pending: BTreeMap<u64, Pending>,
    records: Vec<MetricsRecord>,
    faults: BTreeMap<String, u64>,
    arrivals: u64,
    completions: u64,
}

impl Engine {
    fn count_fault(&mut self, key: &str, n: u64) {
        if n > 0 {
            *self.faults.entry(key.to_string()).or_insert(0) += n;
        }
    }

    /// Analytic page-fault totals for one non-warm run. Only runs that
    /// restored by faulting count: copy restores and cold boots populate
    /// memory up front, so a fallback path contributes nothing.
    fn count_first_run_faults(&mut self, function_id: &str, path: PathKind, inflation_ms: f64) {
        let policy = self.platform.policy();
        let f = self.platform.function(function_id).expect("registered").profile.clone();
        match policy.policy {
            RestorePolicy::Cold | RestorePolicy::CriuCopy => {}
            RestorePolicy::LazyRestoreReap | RestorePolicy::LazyRestoreFaasnap => {
                if inflation_ms <= 0.0 {
                    return;
                }
                let prefetch = if policy.policy == RestorePolicy::LazyRestoreFaasnap {
                    self.platform.params().exec.faasnap_prefetch_fraction
                } else {
                    0.0
                };
                let faulted =
                    (f.touched_pages as f64 * (1.0 - prefetch.clamp(0.0, 1.0))).ceil() as u64;
                self.count_fault("major_faults", faulted);
            }
            RestorePolicy::Trenv => {
                if path != PathKind::Repurposed {
                    return;
                }
                self.count_fault("minor_faults", f.touched_pages);
                self.count_fault("cow_copies", f.written_pages());
                if policy.placement == PoolKind::Rdma {
                    self.count_fault("remote_page_fetches", f.read_pages() + f.written_pages());
                }
            }
        }
    }

    fn sample_memory(&mut self, now_us: f64) {
        let b = self.platform.memory_buckets();
        self.records.push(MetricsRecord::Memory(MemorySample {
            time_ms: round_us(now_us / 1000.0),
            private_bytes: b.active_private_bytes,
            pool_bytes: b.pool_bytes,
            page_cache_bytes: 0,
            sandbox_overhead_bytes: b.idle_instance_bytes,
        }));
    }

    fn handle(
        &mut self,
        now: f64,
        event: Event,
        queue: &mut EventQueue<Event>,
    ) -> Result<(), RunError> {
        match event {
            Event::Arrival { function_id } => {
                let index = self.arrivals;
                self.arrivals += 1;
                let plan =
                    self.platform.begin_invocation(&function_id, now, &mut self.rng_platform)?;
                let prior = self.pending.insert(
                    plan.instance_id,
                    Pending {
                        arrival_us: now,
                        function_id,
                        path: plan.path,
                        startup_ms: plan.startup_ms,
                        breakdown: plan.breakdown,
                        inflation_ms: plan.first_run_inflation_ms,
                        warm: plan.warm,
                        index,
                        exec_ms: 0.0,
                    },
                );
                debug_assert!(prior.is_none(), "instance double-booked");
                queue.schedule(
                    now + plan.startup_ms * 1000.0,
                    Event::SetupDone { instance_id: plan.instance_id },
                )?;
            }
            Event::SetupDone { instance_id } => {
                self.platform.finish_setup(instance_id)?;
                self.running += 1;
                let slowdown = self.cpu.slowdown(self.running as f64);
                let p = self.pending.get_mut(&instance_id).expect("setup for pending invocation");
                let delta = self.platform.exec_delta_ms(&p.function_id, p.warm)?;
                let profile = &self.profiles[&p.function_id];
                let mut rng = self.hub.indexed_stream("exec", p.index);
                p.exec_ms = sample_exec_ms(profile, delta, slowdown, &mut rng) + p.inflation_ms;
                queue.schedule(now + p.exec_ms * 1000.0, Event::ExecDone { instance_id })?;
                let (warm, function_id, path, inflation) =
                    (p.warm, p.function_id.clone(), p.path, p.inflation_ms);
                if !warm {
                    self.count_first_run_faults(&function_id, path, inflation);
                }
            }
            Event::ExecDone { instance_id } => {
                self.running -= 1;
                let p = self.pending.remove(&instance_id).expect("exec for pending invocation");
                let outcome = self.platform.finish_exec(instance_id, now, &mut self.rng_platform)?;
                for task in outcome.purge_tasks {
                    queue.schedule(task.done_at_us, Event::PurgeDone {
                        sandbox_id: task.sandbox_id,
                    })?;
                }
                self.completions += 1;
                self.records.push(MetricsRecord::Invocation(InvocationRecord {
                    time_ms: round_us(p.arrival_us / 1000.0),
                    function_id: p.function_id,
                    instance_id,
                    path: p.path,
                    startup_ms: round_us(p.startup_ms),
                    startup_breakdown: p
                        .breakdown
                        .into_iter()
                        .map(|(k, v)| (k, round_us(v)))
                        .collect(),
                    exec_ms: round_us(p.exec_ms),
                    e2e_ms: round_us(p.startup_ms + p.exec_ms),
                }));
            }
            Event::MaintenanceTick => {
                let tasks = self.platform.maintenance(now, &mut self.rng_platform)?;
                for task in tasks {
                    queue.schedule(task.done_at_us, Event::PurgeDone {
                        sandbox_id: task.sandbox_id,
                    })?;
                }
                self.sample_memory(now);
            }
            Event::PurgeDone { sandbox_id } => {
                self.platform.finish_purge_task(sandbox_id)?;
            }
        }
        Ok(())
    }
}

/// Generate this scenario's arrival trace and its nominal duration.
fn build_trace(cfg: &ScenarioConfig, hub: &RngHub) -> Result<(InvocationTrace, f64), RunError> {
    let mut rng = hub.stream("workload");
    match &cfg.workload {
        WorkloadSpec::W1 { function_ids, burst_size, burst_interval_s, duration_s } => {
            let trace = gen_w1(
                function_ids,
                *burst_size,
                *burst_interval_s,
                *duration_s,
                cfg.platform.keep_alive_s,
                &mut rng,
            )?;
            Ok((trace, *duration_s))
        }
        WorkloadSpec::W2 { function_ids, cycle_s, intensity_per_min, amplitude, duration_s, .. } => {
            let trace =
                gen_w2(function_ids, *cycle_s, *intensity_per_min, *amplitude, *duration_s, &mut rng);
            Ok((trace, *duration_s))
        }
        WorkloadSpec::Trace { path, placement } => {
            let csv = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
                path: path.display().to_string(),
                err: e.to_string(),
            })?;
            let trace = load_trace(&csv, *placement, &mut rng)?;
            // Replay covers whole minutes; round the last arrival up.
            let duration_s = trace
                .arrivals
                .last()
                .map(|a| (a.time_us / 60_000_000.0).ceil() * 60.0)
                .unwrap_or(0.0);
            Ok((trace, duration_s))
        }
        WorkloadSpec::Agents { .. } => Err(ScenarioError::Invalid(
            "agent fleets run through the agent engine, not the function engine".to_string(),
        )
        .into()),
    }
}

/// Run a function scenario to completion and aggregate its report.
pub fn run_functions(cfg: &ScenarioConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let hub = RngHub::new(cfg.seed);
    let (trace, duration_s) = build_trace(cfg, &hub)?;

    let catalog = cfg.resolve_functions()?;
    let mut referenced: Vec<&str> = trace.arrivals.iter().map(|a| a.function_id.as_str()).collect();
    referenced.sort_unstable();
    referenced.dedup();

    let mut platform = Platform::new(cfg.policy, cfg.effective_platform_params())?;
    let mut profiles = BTreeMap::new();
    for id in referenced {
        let profile = catalog
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| ScenarioError::Invalid(format!("unknown function id {id:?}")))?;
        platform.register_function(profile.clone())?;
        profiles.insert(profile.id.clone(), profile.clone());
    }

    let mut queue = EventQueue::new();
    for arrival in &trace.arrivals {
        queue.schedule(arrival.time_us, Event::Arrival {
            function_id: arrival.function_id.clone(),
        })?;
    }
    for tick in 1..=duration_s.ceil() as u64 {
        queue.schedule(tick as f64 * 1_000_000.0, Event::MaintenanceTick)?;
    }

    let rng_platform = hub.stream("platform");
    let mut engine = Engine {
        platform,
        cpu: CpuModel::new(cfg.node.cores),
        profiles,
        hub,
        rng_platform,
        running: 0,
        pending: BTreeMap::new(),
        records: Vec::new(),
        faults: BTreeMap::new(),
        arrivals: 0,
        completions: 0,
    };

    while let Some(ev) = queue.pop() {
        let now = ev.time;
        engine.handle(now, ev.payload, &mut queue)?;
    }

    assert_eq!(
        engine.arrivals, engine.completions,
        "every arrival must produce exactly one completion"
    );
    assert_eq!(engine.arrivals as usize, trace.len(), "trace fully replayed");

    let summary = build_summary(
        &cfg.name,
        cfg.seed,
        duration_s,
        cfg.warmup_s,
        &engine.records,
        engine.faults,
    )?;
    verify_consistency(&summary, &engine.records)?;
    Ok(RunOutput { records: engine.records, summary })
}

/// Run any scenario: function workloads on the platform engine, agent
/// fleets on the agent engine.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunOutput, RunError> {
    match &cfg.workload {
        WorkloadSpec::Agents { .. } => crate::agentrun::run_agents(cfg),
        _ => run_functions(cfg),
    }
}
