//! Scenario configuration: the JSON schema a run is described by, plus
//! validation and catalog resolution.
//!
//! Configs are strict: unknown keys are rejected everywhere so a typo fails
//! the run instead of silently keeping a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{PlatformParams, PolicySpec, RestorePolicy};
use crate::mempool::PoolKind;
use crate::vmext::{StorageMode, VmParams};
use crate::workload::{
    default_agent_catalog, default_function_catalog, AgentProfile, FunctionProfile, PlacementMode,
};

/// Configuration problems. The CLI maps these to its config-error exit code.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: String },
    #[error("cannot parse {path}: {err}")]
    Parse { path: String, err: String },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub cores: f64,
    pub dram_bytes: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig { cores: 32.0, dram_bytes: 256 << 30 }
    }
}

/// Browser process sharing across agents in one fleet.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BrowserSharing {
    /// One browser per agent.
    Off,
    /// Agents share browsers, at most `capacity` per instance.
    Capacity { capacity: u64 },
}

impl Default for BrowserSharing {
    fn default() -> Self {
        BrowserSharing::Capacity { capacity: 10 }
    }
}

/// VM-side options used by agent scenarios.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VmOptions {
    pub storage_mode: StorageMode,
    pub browser_sharing: BrowserSharing,
    pub params: VmParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FleetEntry {
    pub agent_id: String,
    pub count: u64,
}

fn default_burst_size() -> u64 {
    15
}
fn default_burst_interval_s() -> f64 {
    700.0
}
fn default_duration_s() -> f64 {
    1800.0
}
fn default_cycle_s() -> f64 {
    600.0
}
fn default_intensity_per_min() -> f64 {
    27.0
}
fn default_amplitude() -> f64 {
    0.6
}
fn default_w2_cap() -> Option<u64> {
    Some(32 << 30)
}
fn default_placement() -> PlacementMode {
    PlacementMode::Uniform
}

/// What arrives when. `w1` fires synchronized bursts spaced past the
/// keep-alive window; `w2` cycles phase-shifted sinusoidal load across
/// functions under a soft memory cap; `trace` replays per-minute counts;
/// `agents` runs a VM agent fleet to completion instead of a function mix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    W1 {
        function_ids: Vec<String>,
        #[serde(default = "default_burst_size")]
        burst_size: u64,
        #[serde(default = "default_burst_interval_s")]
        burst_interval_s: f64,
        #[serde(default = "default_duration_s")]
        duration_s: f64,
    },
    W2 {
        function_ids: Vec<String>,
        #[serde(default = "default_cycle_s")]
        cycle_s: f64,
        /// Mean per-function arrival rate, events per minute.
        #[serde(default = "default_intensity_per_min")]
        intensity_per_min: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_duration_s")]
        duration_s: f64,
        /// Soft cap on keep-alive memory; applied unless the platform
        /// section sets its own.
        #[serde(default = "default_w2_cap")]
        memory_cap_bytes: Option<u64>,
    },
    Trace {
        /// CSV of function_id,minute_index,invocations.
        path: PathBuf,
        #[serde(default = "default_placement")]
        placement: PlacementMode,
    },
    Agents {
        fleet: Vec<FleetEntry>,
    },
}

fn default_name() -> String {
    "scenario".to_string()
}
fn default_seed() -> u64 {
    42
}
fn default_warmup_s() -> f64 {
    300.0
}
fn default_policy() -> PolicySpec {
    PolicySpec::new(RestorePolicy::Trenv, PoolKind::Cxl)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub node: NodeConfig,
    #[serde(default = "default_policy")]
    pub policy: PolicySpec,
    #[serde(default)]
    pub platform: PlatformParams,
    pub workload: WorkloadSpec,
    /// Invocations before this mark are recorded but not summarized.
    #[serde(default = "default_warmup_s")]
    pub warmup_s: f64,
    /// JSON file holding a replacement function catalog.
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    /// Inline profiles, upserted over the catalog by id.
    #[serde(default)]
    pub functions: Vec<FunctionProfile>,
    #[serde(default)]
    pub vm: VmOptions,
    /// Where run artifacts go when the caller does not name a directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text)
            .map_err(|e| ScenarioError::Parse { path: "<config>".to_string(), err: e.to_string() })
    }

    /// Read and parse a config file. Relative paths inside the config are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        let mut cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| {
            ScenarioError::Parse { path: path.display().to_string(), err: e.to_string() }
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        if let Some(p) = &self.catalog_path {
            if p.is_relative() {
                self.catalog_path = Some(dir.join(p));
            }
        }
        if let WorkloadSpec::Trace { path, .. } = &mut self.workload {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }

    /// Platform parameters with workload-implied defaults applied.
    pub fn effective_platform_params(&self) -> PlatformParams {
        let mut params = self.platform.clone();
        if let WorkloadSpec::W2 { memory_cap_bytes, .. } = &self.workload {
            if params.pool_memory_cap_bytes.is_none() {
                params.pool_memory_cap_bytes = *memory_cap_bytes;
            }
        }
        params
    }

    /// The function catalog this scenario runs against: the built-in
    /// catalog, replaced by `catalog_path` when given, then overlaid with
    /// inline `functions` by id.
    pub fn resolve_functions(&self) -> Result<Vec<FunctionProfile>, ScenarioError> {
        let mut catalog = match &self.catalog_path {
            None => default_function_catalog(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
                    path: path.display().to_string(),
                    err: e.to_string(),
                })?;
                serde_json::from_str::<Vec<FunctionProfile>>(&text).map_err(|e| {
                    ScenarioError::Parse { path: path.display().to_string(), err: e.to_string() }
                })?
            }
        };
        for f in &self.functions {
            match catalog.iter_mut().find(|c| c.id == f.id) {
                Some(slot) => *slot = f.clone(),
                None => catalog.push(f.clone()),
            }
        }
        for f in &catalog {
            f.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(catalog)
    }

    pub fn resolve_agents(&self) -> Vec<AgentProfile> {
        default_agent_catalog()
    }

    /// Reject configs that cannot produce a meaningful run. IO-dependent
    /// checks (catalog file, trace file) happen at resolution time.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.is_empty() {
            return Err(invalid("name must be non-empty"));
        }
        if self.node.cores <= 0.0 {
            return Err(invalid("node.cores must be positive"));
        }
        if self.warmup_s < 0.0 {
            return Err(invalid("warmup_s must be nonnegative"));
        }
        self.policy.validate().map_err(|e| invalid(e.to_string()))?;
        let functions = self.resolve_functions()?;
        let known = |id: &String| functions.iter().any(|f| &f.id == id);

        match &self.workload {
            WorkloadSpec::W1 { function_ids, burst_size, burst_interval_s, duration_s } => {
                if function_ids.is_empty() {
                    return Err(invalid("w1 needs at least one function id"));
                }
                if let Some(id) = function_ids.iter().find(|id| !known(id)) {
                    return Err(invalid(format!("unknown function id {id:?}")));
                }
                if *burst_size == 0 {
                    return Err(invalid("w1 burst_size must be at least 1"));
                }
                if *burst_interval_s <= self.platform.keep_alive_s {
                    return Err(invalid(format!(
                        "w1 burst interval {burst_interval_s} s must exceed the keep-alive \
                         window {} s or every burst after the first lands warm",
                        self.platform.keep_alive_s
                    )));
                }
                if *duration_s <= self.warmup_s {
                    return Err(invalid("duration_s must exceed warmup_s"));
                }
            }
            WorkloadSpec::W2 { function_ids, cycle_s, intensity_per_min, amplitude, duration_s, .. } => {
                if function_ids.is_empty() {
                    return Err(invalid("w2 needs at least one function id"));
                }
                if let Some(id) = function_ids.iter().find(|id| !known(id)) {
                    return Err(invalid(format!("unknown function id {id:?}")));
                }
                if *cycle_s <= 0.0 {
                    return Err(invalid("w2 cycle_s must be positive"));
                }
                if *intensity_per_min < 0.0 {
                    return Err(invalid("w2 intensity_per_min must be nonnegative"));
                }
                if !(0.0..=1.0).contains(amplitude) {
                    return Err(invalid("w2 amplitude must be within [0, 1]"));
                }
                if *duration_s <= self.warmup_s {
                    return Err(invalid("duration_s must exceed warmup_s"));
                }
            }
            WorkloadSpec::Trace { path, placement } => {
                if path.as_os_str().is_empty() {
                    return Err(invalid("trace path must be non-empty"));
                }
                if let PlacementMode::Skewed { burst_probability, window_ms } = placement {
                    if !(0.0..=1.0).contains(burst_probability) {
                        return Err(invalid("burst_probability must be within [0, 1]"));
                    }
                    if *window_ms <= 0.0 || *window_ms > 60_000.0 {
                        return Err(invalid("window_ms must be within (0, 60000]"));
                    }
                }
            }
            WorkloadSpec::Agents { fleet } => {
                if fleet.is_empty() {
                    return Err(invalid("agents workload needs a non-empty fleet"));
                }
                let agents = self.resolve_agents();
                for entry in fleet {
                    if entry.count == 0 {
                        return Err(invalid(format!(
                            "fleet count for {:?} must be at least 1",
                            entry.agent_id
                        )));
                    }
                    if !agents.iter().any(|a| a.id == entry.agent_id) {
                        return Err(invalid(format!("unknown agent id {:?}", entry.agent_id)));
                    }
                }
                if let BrowserSharing::Capacity { capacity } = self.vm.browser_sharing {
                    if capacity == 0 {
                        return Err(invalid("browser sharing capacity must be at least 1"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Two configs can be compared only when their workloads are literally
    /// the same draw: same workload, same seed, same catalog.
    pub fn comparable_workloads(&self, other: &ScenarioConfig) -> bool {
        self.seed == other.seed
            && self.workload == other.workload
            && self.catalog_path == other.catalog_path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "workload": {"kind": "w1", "function_ids": ["CR"]}
        }"#
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.warmup_s, 300.0);
        assert_eq!(cfg.node.cores, 32.0);
        assert_eq!(cfg.policy.policy, RestorePolicy::Trenv);
        match &cfg.workload {
            WorkloadSpec::W1 { burst_size, burst_interval_s, duration_s, .. } => {
                assert_eq!(*burst_size, 15);
                assert_eq!(*burst_interval_s, 700.0);
                assert_eq!(*duration_s, 1800.0);
            }
            other => panic!("unexpected workload {other:?}"),
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        let top = r#"{"workload": {"kind": "w1", "function_ids": ["CR"]}, "oops": 1}"#;
        assert!(ScenarioConfig::from_json_str(top).is_err());

        let nested = r#"{
            "workload": {"kind": "w1", "function_ids": ["CR"]},
            "platform": {"keepalive_s": 600.0}
        }"#;
        let err = ScenarioConfig::from_json_str(nested).unwrap_err();
        assert!(err.to_string().contains("keepalive_s"), "{err}");
    }

    #[test]
    fn w1_interval_must_beat_keep_alive() {
        let text = r#"{
            "workload": {"kind": "w1", "function_ids": ["CR"], "burst_interval_s": 300.0}
        }"#;
        let cfg = ScenarioConfig::from_json_str(text).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("keep-alive"), "{err}");
    }

    #[test]
    fn unknown_function_id_rejected() {
        let text = r#"{"workload": {"kind": "w1", "function_ids": ["no_such_fn"]}}"#;
        let cfg = ScenarioConfig::from_json_str(text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inline_functions_upsert_the_catalog() {
        let text = r#"{
            "workload": {"kind": "w1", "function_ids": ["tiny"]},
            "functions": [{
                "id": "tiny", "language": "python", "image_mib": 60.0,
                "thread_count": 4, "base_exec_ms": 50.0, "exec_sigma": 0.1,
                "touched_pages": 1000, "read_fraction": 0.8, "write_fraction": 0.2,
                "reaccess_factor": 2.0, "rw_estimated": true,
                "category": "memory_insensitive"
            }]
        }"#;
        let cfg = ScenarioConfig::from_json_str(text).unwrap();
        cfg.validate().unwrap();
        let catalog = cfg.resolve_functions().unwrap();
        assert!(catalog.iter().any(|f| f.id == "tiny"));
        assert!(catalog.len() > 1, "built-in catalog still present");
    }

    #[test]
    fn w2_soft_cap_defaults_into_platform_params() {
        let text = r#"{"workload": {"kind": "w2", "function_ids": ["JS"]}}"#;
        let cfg = ScenarioConfig::from_json_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.effective_platform_params().pool_memory_cap_bytes, Some(32 << 30));

        let override_text = r#"{
            "workload": {"kind": "w2", "function_ids": ["JS"]},
            "platform": {"pool_memory_cap_bytes": 1073741824}
        }"#;
        let cfg = ScenarioConfig::from_json_str(override_text).unwrap();
        assert_eq!(cfg.effective_platform_params().pool_memory_cap_bytes, Some(1 << 30));
    }

    #[test]
    fn agent_fleet_validation() {
        let good = r#"{
            "workload": {"kind": "agents", "fleet": [{"agent_id": "blog_summary", "count": 200}]}
        }"#;
        ScenarioConfig::from_json_str(good).unwrap().validate().unwrap();

        let unknown = r#"{
            "workload": {"kind": "agents", "fleet": [{"agent_id": "nobody", "count": 2}]}
        }"#;
        assert!(ScenarioConfig::from_json_str(unknown).unwrap().validate().is_err());

        let zero_cap = r#"{
            "workload": {"kind": "agents", "fleet": [{"agent_id": "blackjack", "count": 1}]},
            "vm": {"browser_sharing": {"mode": "capacity", "capacity": 0}}
        }"#;
        assert!(ScenarioConfig::from_json_str(zero_cap).unwrap().validate().is_err());
    }

    #[test]
    fn load_resolves_relative_paths_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("scenario.json");
        std::fs::write(
            &config_path,
            r#"{"workload": {"kind": "trace", "path": "trace.csv"}}"#,
        )
        .unwrap();
        let cfg = ScenarioConfig::load(&config_path).unwrap();
        match &cfg.workload {
            WorkloadSpec::Trace { path, .. } => assert_eq!(*path, dir.path().join("trace.csv")),
            other => panic!("unexpected workload {other:?}"),
        }
    }

    #[test]
    fn comparability_requires_identical_workload_draw() {
        let a = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        let mut b = a.clone();
        assert!(a.comparable_workloads(&b));
        b.seed = 7;
        assert!(!a.comparable_workloads(&b));
        let mut c = a.clone();
        c.policy = PolicySpec::new(RestorePolicy::CriuCopy, PoolKind::Local);
        assert!(a.comparable_workloads(&c), "policy differences stay comparable");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ScenarioConfig::from_json_str(minimal_json()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ScenarioConfig::from_json_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.workload, cfg.workload);
    }
}
