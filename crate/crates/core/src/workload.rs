//! Profile catalogs and workload generation: bursty traffic (W1), phase
//! shifted sinusoidal traffic (W2), and per-minute trace replay.

use rand::Rng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mempool::PAGE_SIZE;
use crate::simcore::{SimTime, MS, SEC};

const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("burst interval {interval_s}s must exceed keep-alive {keep_alive_s}s for a burst workload")]
    BurstIntervalTooShort { interval_s: f64, keep_alive_s: f64 },
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("profile {id}: {reason}")]
    BadProfile { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionCategory {
    MemoryInsensitive,
    LargeFootprint,
    Brief,
}

/// One serverless function. Image size and thread count follow the
/// measured catalog; the access-trace fields (`touched_pages`, fractions,
/// `reaccess_factor`) describe the synthetic page trace one invocation
/// makes over its image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionProfile {
    pub id: String,
    pub language: String,
    pub image_mib: f64,
    pub thread_count: u64,
    /// Median execution time with everything resident in local DRAM.
    pub base_exec_ms: f64,
    /// Lognormal sigma around the median.
    pub exec_sigma: f64,
    /// Distinct pages one invocation touches.
    pub touched_pages: u64,
    /// Fraction of touched pages that are only read.
    pub read_fraction: f64,
    /// Fraction of touched pages that are written.
    pub write_fraction: f64,
    /// Mean direct reads per touched read page on a byte-addressable pool.
    pub reaccess_factor: f64,
    /// The read/write split comes from coarse profiling, not an exact
    /// page trace; entries keep this flag set.
    pub rw_estimated: bool,
    pub category: FunctionCategory,
}

/// Ceiling after snapping to nanopage precision, so products that are
/// exact in decimal (2500 * 0.65) never round one page up.
fn ceil_pages(pages: f64) -> u64 {
    ((pages * 1e9).round() / 1e9).ceil() as u64
}

impl FunctionProfile {
    pub fn image_bytes(&self) -> u64 {
        (self.image_mib * MIB).round() as u64
    }

    pub fn image_pages(&self) -> u64 {
        self.image_bytes().div_ceil(PAGE_SIZE)
    }

    pub fn read_pages(&self) -> u64 {
        ceil_pages(self.read_fraction * self.touched_pages as f64)
    }

    pub fn written_pages(&self) -> u64 {
        ceil_pages(self.write_fraction * self.touched_pages as f64)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |reason: &str| WorkloadError::BadProfile {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.image_mib <= 0.0 {
            return Err(bad("image size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.read_fraction)
            || !(0.0..=1.0).contains(&self.write_fraction)
            || self.read_fraction + self.write_fraction > 1.0 + 1e-9
        {
            return Err(bad("read + write fractions must fit in the touched pages"));
        }
        if self.touched_pages > self.image_pages() {
            return Err(bad("cannot touch more pages than the image holds"));
        }
        Ok(())
    }
}

/// Work phases of one agent run. CPU-bound phases contend for cores;
/// LLM waits are pure I/O and never stretch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    LlmWait,
    ToolCpu,
    Browser,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Phase {
    pub kind: PhaseKind,
    /// Uncontended duration, seconds.
    pub wall_s: f64,
    /// vCPU demand while the phase runs (0 for LLM waits).
    pub cpu_demand: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: String,
    pub framework: String,
    pub e2e_base_s: f64,
    pub memory_mb: f64,
    pub cpu_time_s: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub browser_required: bool,
    /// Billed VM allocation.
    pub alloc_gb: f64,
    /// vCPU demand of tool segments (non-browser agents).
    pub tool_cpu_demand: f64,
    /// vCPU demand of this agent's tabs inside a browser.
    pub browser_tab_demand: f64,
    /// vCPU demand of the browser process itself (amortized when shared).
    pub browser_overhead_demand: f64,
    /// CPU segments per run.
    pub segments: u64,
    /// Read-only base files the run reads (runtime, packages).
    pub base_file_mb: f64,
    /// Files the run writes or reads privately.
    pub private_file_mb: f64,
}

impl AgentProfile {
    /// vCPU demand of the CPU-bound phases when the agent runs alone.
    pub fn standalone_demand(&self) -> f64 {
        if self.browser_required {
            self.browser_tab_demand + self.browser_overhead_demand
        } else {
            self.tool_cpu_demand
        }
    }

    /// Wall time of the CPU-bound phases when uncontended: the time the
    /// recorded cpu seconds take at the phase demand.
    pub fn cpu_wall_s(&self) -> f64 {
        self.cpu_time_s / self.standalone_demand()
    }

    /// Alternating llm-wait / cpu segments. Every agent of a profile gets
    /// the identical layout, which keeps contention analysis exact.
    pub fn phase_layout(&self) -> Vec<Phase> {
        let k = self.segments.max(1);
        let cpu_wall = self.cpu_wall_s();
        let llm_wall = (self.e2e_base_s - cpu_wall).max(0.0);
        let cpu_kind =
            if self.browser_required { PhaseKind::Browser } else { PhaseKind::ToolCpu };
        let demand = self.standalone_demand();
        let mut phases = Vec::with_capacity(2 * k as usize);
        for _ in 0..k {
            phases.push(Phase {
                kind: PhaseKind::LlmWait,
                wall_s: llm_wall / k as f64,
                cpu_demand: 0.0,
            });
            phases.push(Phase { kind: cpu_kind, wall_s: cpu_wall / k as f64, cpu_demand: demand });
        }
        phases
    }
}

/// The measured function catalog. Image sizes and thread counts come
/// straight from measurement; timing and page-trace fields are model
/// calibration.
pub fn default_function_catalog() -> Vec<FunctionProfile> {
    use FunctionCategory::*;
    let f = |id: &str,
             language: &str,
             image_mib: f64,
             thread_count: u64,
             base_exec_ms: f64,
             touched_pages: u64,
             read_fraction: f64,
             write_fraction: f64,
             reaccess_factor: f64,
             category: FunctionCategory| FunctionProfile {
        id: id.to_string(),
        language: language.to_string(),
        image_mib,
        thread_count,
        base_exec_ms,
        exec_sigma: 0.25,
        touched_pages,
        read_fraction,
        write_fraction,
        reaccess_factor,
        rw_estimated: true,
        category,
    };
    vec![
        f("DH", "python", 50.4, 14, 30.0, 9_500, 0.80, 0.20, 1.0, Brief),
        f("JS", "python", 94.9, 14, 110.0, 2_500, 0.65, 0.30, 2.0, Brief),
        f("PR", "python", 116.0, 395, 250.0, 12_000, 0.85, 0.10, 1.2, LargeFootprint),
        f("IR", "python", 855.0, 141, 28.0, 9_000, 0.90, 0.05, 1.0, LargeFootprint),
        f("IP", "python", 67.1, 15, 60.0, 6_000, 0.50, 0.50, 1.0, MemoryInsensitive),
        f("VP", "python", 324.0, 204, 800.0, 15_000, 0.55, 0.45, 1.0, MemoryInsensitive),
        f("CH", "python", 94.9, 38, 150.0, 4_000, 0.70, 0.30, 1.0, MemoryInsensitive),
        f("CR", "nodejs", 124.0, 16, 450.0, 5_000, 0.60, 0.35, 1.0, Brief),
        f("JJS", "nodejs", 111.0, 21, 120.0, 2_600, 0.65, 0.30, 2.0, Brief),
        f("IFR", "nodejs", 253.0, 21, 90.0, 20_000, 0.35, 0.60, 1.0, LargeFootprint),
    ]
}

/// The measured agent catalog. Latency, memory, CPU time, and token
/// counts come straight from measurement; demands and file splits are
/// model calibration.
pub fn default_agent_catalog() -> Vec<AgentProfile> {
    let a = |id: &str,
             framework: &str,
             e2e_base_s: f64,
             memory_mb: f64,
             cpu_time_s: f64,
             input_tokens: u64,
             output_tokens: u64,
             browser: bool,
             alloc_gb: f64,
             tool: f64,
             tab: f64,
             overhead: f64,
             base_file_mb: f64,
             private_file_mb: f64| AgentProfile {
        id: id.to_string(),
        framework: framework.to_string(),
        e2e_base_s,
        memory_mb,
        cpu_time_s,
        input_tokens,
        output_tokens,
        browser_required: browser,
        alloc_gb,
        tool_cpu_demand: tool,
        browser_tab_demand: tab,
        browser_overhead_demand: overhead,
        segments: 8,
        base_file_mb,
        private_file_mb,
    };
    vec![
        a("blackjack", "LangChain", 3.2, 74.0, 0.411, 1690, 8, false, 2.0, 0.25, 0.0, 0.0, 16.0, 4.0),
        a("bug_fixer", "LangChain", 36.5, 95.0, 0.809, 1557, 530, false, 2.0, 0.25, 0.0, 0.0, 16.0, 6.0),
        a("map_reduce", "LangChain", 56.5, 199.0, 1.2, 8640, 2644, false, 2.0, 0.25, 0.0, 0.0, 40.0, 20.0),
        a("shop_assistant", "Browser-Use", 140.7, 1080.0, 10.3, 43185, 1494, true, 4.0, 0.0, 0.12, 0.08, 330.0, 60.0),
        a("blog_summary", "OWL", 193.1, 1246.0, 56.8, 49398, 2703, true, 4.0, 0.0, 0.20, 0.30, 390.0, 60.0),
        a("game_design", "OpenManus", 107.0, 1389.0, 7.5, 75121, 2098, true, 4.0, 0.0, 0.10, 0.05625, 350.0, 100.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arrival {
    pub function_id: String,
    pub time_us: SimTime,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct InvocationTrace {
    pub arrivals: Vec<Arrival>,
}

impl InvocationTrace {
    fn sort(&mut self) {
        self.arrivals
            .sort_by(|a, b| a.time_us.total_cmp(&b.time_us).then(a.function_id.cmp(&b.function_id)));
    }

    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }
}

/// Bursty traffic: every function fires `burst_size` near-simultaneous
/// invocations each `burst_interval_s`, with the interval strictly beyond
/// keep-alive so no burst ever lands warm.
pub fn gen_w1(
    function_ids: &[String],
    burst_size: u64,
    burst_interval_s: f64,
    duration_s: f64,
    keep_alive_s: f64,
    rng: &mut impl RngCore,
) -> Result<InvocationTrace, WorkloadError> {
    if burst_interval_s <= keep_alive_s {
        return Err(WorkloadError::BurstIntervalTooShort {
            interval_s: burst_interval_s,
            keep_alive_s,
        });
    }
    let jitter_window_us = 200.0 * MS;
    let mut trace = InvocationTrace::default();
    let mut burst_start = 0.0;
    while burst_start < duration_s {
        for id in function_ids {
            for _ in 0..burst_size {
                trace.arrivals.push(Arrival {
                    function_id: id.clone(),
                    time_us: burst_start * SEC + rng.gen::<f64>() * jitter_window_us,
                });
            }
        }
        burst_start += burst_interval_s;
    }
    trace.sort();
    Ok(trace)
}

/// Phase-shifted sinusoidal traffic. Function `i` of `n` arrives as an
/// inhomogeneous Poisson process with rate
/// `intensity_per_min * (1 + amplitude * sin(2*pi*t/cycle + 2*pi*i/n))`,
/// so per-function peaks rotate through the cycle. `amplitude = 0`
/// degenerates to a flat Poisson process.
pub fn gen_w2(
    function_ids: &[String],
    cycle_s: f64,
    intensity_per_min: f64,
    amplitude: f64,
    duration_s: f64,
    rng: &mut impl RngCore,
) -> InvocationTrace {
    let mut trace = InvocationTrace::default();
    let n = function_ids.len().max(1) as f64;
    let rate_max_per_s = intensity_per_min * (1.0 + amplitude.abs()) / 60.0;
    if rate_max_per_s <= 0.0 {
        return trace;
    }
    for (i, id) in function_ids.iter().enumerate() {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / n;
        // Thinned homogeneous process at the envelope rate.
        let mut t = 0.0f64;
        loop {
            t += -((1.0 - rng.gen::<f64>()).ln()) / rate_max_per_s;
            if t >= duration_s {
                break;
            }
            let rate = intensity_per_min / 60.0
                * (1.0 + amplitude * (2.0 * std::f64::consts::PI * t / cycle_s + phase).sin());
            if rng.gen::<f64>() * rate_max_per_s < rate {
                trace.arrivals.push(Arrival { function_id: id.clone(), time_us: t * SEC });
            }
        }
    }
    trace.sort();
    trace
}

/// How per-minute counts spread inside their minute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PlacementMode {
    /// Independently uniform over the minute.
    Uniform,
    /// Each arrival lands with `burst_probability` inside a shared burst
    /// window of `window_ms` at a random offset, else uniformly.
    Skewed { burst_probability: f64, window_ms: f64 },
}

/// Parse a per-minute trace CSV. Exact header
/// `function_id,minute_index,invocations`, minute_index 0-based.
pub fn load_trace(
    csv: &str,
    placement: PlacementMode,
    rng: &mut impl RngCore,
) -> Result<InvocationTrace, WorkloadError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "function_id,minute_index,invocations" => {}
        Some((_, header)) => {
            return Err(WorkloadError::Parse {
                line: 1,
                msg: format!(
                    "expected header function_id,minute_index,invocations, got {header:?}"
                ),
            })
        }
        None => return Err(WorkloadError::Parse { line: 1, msg: "empty file".to_string() }),
    }
    let mut trace = InvocationTrace::default();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (id, minute, count) = match (fields.next(), fields.next(), fields.next(), fields.next())
        {
            (Some(a), Some(b), Some(c), None) => (a.trim(), b.trim(), c.trim()),
            _ => {
                return Err(WorkloadError::Parse {
                    line: line_no,
                    msg: "expected exactly 3 comma-separated fields".to_string(),
                })
            }
        };
        if id.is_empty() {
            return Err(WorkloadError::Parse { line: line_no, msg: "empty function_id".to_string() });
        }
        let minute: u64 = minute.parse().map_err(|e| WorkloadError::Parse {
            line: line_no,
            msg: format!("bad minute_index {minute:?}: {e}"),
        })?;
        let count: u64 = count.parse().map_err(|e| WorkloadError::Parse {
            line: line_no,
            msg: format!("bad invocations {count:?}: {e}"),
        })?;
        let minute_start = minute as f64 * 60.0 * SEC;
        let burst_offset = match placement {
            PlacementMode::Uniform => 0.0,
            PlacementMode::Skewed { window_ms, .. } => {
                rng.gen::<f64>() * (60.0 * SEC - window_ms * MS).max(0.0)
            }
        };
        for _ in 0..count {
            let offset = match placement {
                PlacementMode::Uniform => rng.gen::<f64>() * 60.0 * SEC,
                PlacementMode::Skewed { burst_probability, window_ms } => {
                    if rng.gen::<f64>() < burst_probability {
                        burst_offset + rng.gen::<f64>() * window_ms * MS
                    } else {
                        rng.gen::<f64>() * 60.0 * SEC
                    }
                }
            };
            trace.arrivals.push(Arrival {
                function_id: id.to_string(),
                time_us: minute_start + offset,
            });
        }
    }
    trace.sort();
    Ok(trace)
}
