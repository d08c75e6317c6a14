//! Scenario runner for the simulator library. Three verbs: run one
//! scenario, compare arms that share a workload, and price an agent
//! catalog. Artifacts are plain files (JSONL, JSON, CSV); plotting and
//! dashboards stay out of scope.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use envsim_core::costmodel::{relative_cost_report, report_csv, PriceSheet};
use envsim_core::report::RunOutput;
use envsim_core::runner::{simulate, RunError};
use envsim_core::scenario::{ScenarioConfig, ScenarioError};
use envsim_core::workload::{default_agent_catalog, AgentProfile};

#[derive(Parser)]
#[command(name = "envsim", version, about = "Serverless environment simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.jsonl, summary.json, cdf.csv.
    Simulate(SimulateArgs),
    /// Run two or more scenario arms over the same workload and write a
    /// per-function speedup and memory-reduction table.
    Compare(CompareArgs),
    /// Price an agent catalog: LLM cost vs serverless cost per agent.
    Cost(CostArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more scenario configs, comma separated. The first is the
    /// subject; every later arm is a baseline it is compared against.
    #[arg(long, value_delimiter = ',', required = true)]
    configs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// JSON array of agent ids (resolved from the built-in catalog) or of
    /// full agent profiles.
    #[arg(long)]
    agents: PathBuf,
    /// Price sheet (JSON: p_in, p_out, p_s).
    #[arg(long)]
    prices: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Anything wrong with inputs exits 2; failures during a valid run exit 1.
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(inner) => CliError::Config(inner.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ENVSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Compare(args) => run_compare(args),
        Command::Cost(args) => run_cost(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn write_output(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    out.write_to_dir(dir)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", dir.display())))
}

fn run_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))?;
    log::info!("running scenario {:?} with seed {}", cfg.name, cfg.seed);
    let output = simulate(&cfg)?;
    write_output(&output, &out_dir)?;
    log::info!(
        "{} invocations, {} counted",
        output.summary.invocations_total,
        output.summary.invocations_counted
    );
    Ok(())
}

fn run_compare(args: CompareArgs) -> Result<(), CliError> {
    if args.configs.len() < 2 {
        return Err(CliError::Config("compare needs at least two configs".into()));
    }
    let mut arms = Vec::new();
    for path in &args.configs {
        arms.push(ScenarioConfig::load(path)?);
    }
    for (path, arm) in args.configs.iter().zip(&arms).skip(1) {
        if !arms[0].comparable_workloads(arm) {
            return Err(CliError::Config(format!(
                "incomparable scenarios: {} and {} must share seed, workload, and catalog",
                args.configs[0].display(),
                path.display()
            )));
        }
    }

    // Arms are independent engines; run them in parallel, assemble in order.
    let outputs: Vec<Result<RunOutput, RunError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = arms.iter().map(|cfg| scope.spawn(move || simulate(cfg))).collect();
        handles.into_iter().map(|h| h.join().expect("arm thread panicked")).collect()
    });
    let mut runs = Vec::new();
    for out in outputs {
        runs.push(out?);
    }

    let mut csv = String::from(
        "function_id,subject,baseline,p75_exec_speedup,p99_e2e_speedup,peak_memory_reduction\n",
    );
    let subject = &runs[0].summary;
    for (i, run) in runs.iter().enumerate().skip(1) {
        let base = &run.summary;
        let mem_reduction = if base.peak_memory_bytes > 0 {
            1.0 - subject.peak_memory_bytes as f64 / base.peak_memory_bytes as f64
        } else {
            0.0
        };
        for (id, f) in &subject.functions {
            let Some(b) = base.functions.get(id) else {
                return Err(CliError::Runtime(format!(
                    "arm {} produced no records for function {id}",
                    i
                )));
            };
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                id,
                subject.scenario,
                base.scenario,
                b.exec.p75_ms / f.exec.p75_ms,
                b.e2e.p99_ms / f.e2e.p99_ms,
                mem_reduction
            ));
        }
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", args.out.display())))?;
    for (i, (run, cfg)) in runs.iter().zip(&arms).enumerate() {
        write_output(run, &args.out.join(format!("arm_{i}_{}", cfg.name)))?;
    }
    std::fs::write(args.out.join("comparison.csv"), csv)
        .map_err(|e| CliError::Runtime(format!("writing comparison.csv: {e}")))?;
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {} {}: {e}", what, path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {} {}: {e}", what, path.display())))
}

fn run_cost(args: CostArgs) -> Result<(), CliError> {
    let prices: PriceSheet = load_json(&args.prices, "price sheet")?;
    let raw: serde_json::Value = load_json(&args.agents, "agent list")?;
    let agents: Vec<AgentProfile> = if raw
        .as_array()
        .is_some_and(|a| a.iter().all(|v| v.is_string()))
    {
        let catalog = default_agent_catalog();
        let ids: Vec<String> =
            serde_json::from_value(raw).map_err(|e| CliError::Config(e.to_string()))?;
        ids.into_iter()
            .map(|id| {
                catalog
                    .iter()
                    .find(|a| a.id == id)
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("unknown agent id {id:?}")))
            })
            .collect::<Result<_, _>>()?
    } else {
        serde_json::from_value(raw)
            .map_err(|e| CliError::Config(format!("parsing agent profiles: {e}")))?
    };

    let rows = relative_cost_report(&agents, &prices);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", args.out.display())))?;
    std::fs::write(args.out.join("cost.csv"), report_csv(&rows))
        .map_err(|e| CliError::Runtime(format!("writing cost.csv: {e}")))?;
    Ok(())
}
