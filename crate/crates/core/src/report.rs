//! Metrics records and report rendering.
//!
//! A run emits one JSON line per invocation plus periodic memory samples
//! (metrics.jsonl), an aggregate summary (summary.json), and plot-ready
//! latency CDFs (cdf.csv). The summary is recomputable from the records;
//! `verify_consistency` checks exactly that, and every map is a BTreeMap so
//! equal inputs give byte-equal output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::PathKind;
use crate::simcore::percentile;

/// Reports exclude everything before this mark so pool-filling transients
/// don't pollute steady-state percentiles.
pub const DEFAULT_WARMUP_S: f64 = 300.0;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no samples after warmup to summarize")]
    NoSamples,
    #[error("summary does not match records: {0}")]
    Inconsistent(String),
}

/// Millisecond value rounded to microsecond precision, the resolution every
/// report uses.
pub fn round_us(ms: f64) -> f64 {
    (ms * 1000.0).round() / 1000.0
}

/// One finished invocation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InvocationRecord {
    /// Arrival time since scenario start, milliseconds.
    pub time_ms: f64,
    pub function_id: String,
    pub instance_id: u64,
    pub path: PathKind,
    pub startup_ms: f64,
    pub startup_breakdown: BTreeMap<String, f64>,
    pub exec_ms: f64,
    pub e2e_ms: f64,
}

/// Periodic snapshot of node memory, split into the buckets the summary
/// tracks peaks for.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MemorySample {
    pub time_ms: f64,
    /// Private bytes of instances actively starting or running.
    pub private_bytes: u64,
    /// Shared pool usage at the configured placement.
    pub pool_bytes: u64,
    /// Guest plus host page cache (agent scenarios; zero for functions).
    pub page_cache_bytes: u64,
    /// Bytes held by idle keep-alive instances awaiting reuse.
    pub sandbox_overhead_bytes: u64,
}

impl MemorySample {
    /// Total node-attributable bytes in this sample.
    pub fn total_bytes(&self) -> u64 {
        self.private_bytes + self.pool_bytes + self.page_cache_bytes + self.sandbox_overhead_bytes
    }
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Invocation(InvocationRecord),
    Memory(MemorySample),
}

/// Nearest-rank percentile snapshot of one duration series.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DurationStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p75_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl DurationStats {
    /// Nearest-rank percentiles over `samples`; values are already rounded,
    /// the mean is rounded here.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        Some(DurationStats {
            count: samples.len() as u64,
            mean_ms: round_us(mean),
            p50_ms: percentile(samples, 50.0).expect("non-empty"),
            p75_ms: percentile(samples, 75.0).expect("non-empty"),
            p99_ms: percentile(samples, 99.0).expect("non-empty"),
            max_ms: percentile(samples, 100.0).expect("non-empty"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FunctionSummary {
    pub invocations: u64,
    pub paths: BTreeMap<String, u64>,
    pub startup: DurationStats,
    pub exec: DurationStats,
    pub e2e: DurationStats,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    /// All invocations, including warmup.
    pub invocations_total: u64,
    /// Invocations the statistics below are computed from.
    pub invocations_counted: u64,
    pub paths: BTreeMap<String, u64>,
    pub functions: BTreeMap<String, FunctionSummary>,
    pub startup: DurationStats,
    pub e2e: DurationStats,
    /// Max over the memory time series (all samples, warmup included:
    /// peak is a capacity question, not a steady-state one).
    pub peak_memory_bytes: u64,
    pub peak_pool_bytes: u64,
    /// Analytic fault totals for counted invocations.
    pub fault_counters: BTreeMap<String, u64>,
}

/// Split a record stream into invocations and memory samples.
fn partition(records: &[MetricsRecord]) -> (Vec<&InvocationRecord>, Vec<&MemorySample>) {
    let mut inv = Vec::new();
    let mut mem = Vec::new();
    for r in records {
        match r {
            MetricsRecord::Invocation(i) => inv.push(i),
            MetricsRecord::Memory(m) => mem.push(m),
        }
    }
    (inv, mem)
}

/// Aggregate a record stream. Invocations arriving before `warmup_s` are
/// counted in `invocations_total` but excluded from every statistic.
pub fn build_summary(
    scenario: &str,
    seed: u64,
    duration_s: f64,
    warmup_s: f64,
    records: &[MetricsRecord],
    fault_counters: BTreeMap<String, u64>,
) -> Result<Summary, ReportError> {
    let (invocations, memory) = partition(records);
    let warmup_ms = warmup_s * 1000.0;
    let counted: Vec<&&InvocationRecord> =
        invocations.iter().filter(|r| r.time_ms >= warmup_ms).collect();
    if counted.is_empty() {
        return Err(ReportError::NoSamples);
    }

    let mut paths: BTreeMap<String, u64> = BTreeMap::new();
    let mut by_function: BTreeMap<String, Vec<&InvocationRecord>> = BTreeMap::new();
    for r in &counted {
        *paths.entry(r.path.as_str().to_string()).or_insert(0) += 1;
        by_function.entry(r.function_id.clone()).or_default().push(r);
    }

    let collect =
        |rows: &[&InvocationRecord], f: fn(&InvocationRecord) -> f64| -> Vec<f64> {
            rows.iter().map(|r| f(r)).collect()
        };

    let mut functions = BTreeMap::new();
    for (id, rows) in &by_function {
        let mut fn_paths: BTreeMap<String, u64> = BTreeMap::new();
        for r in rows {
            *fn_paths.entry(r.path.as_str().to_string()).or_insert(0) += 1;
        }
        functions.insert(
            id.clone(),
            FunctionSummary {
                invocations: rows.len() as u64,
                paths: fn_paths,
                startup: DurationStats::from_samples(&collect(rows, |r| r.startup_ms))
                    .expect("rows non-empty"),
                exec: DurationStats::from_samples(&collect(rows, |r| r.exec_ms))
                    .expect("rows non-empty"),
                e2e: DurationStats::from_samples(&collect(rows, |r| r.e2e_ms))
                    .expect("rows non-empty"),
            },
        );
    }

    let all: Vec<&InvocationRecord> = counted.iter().map(|r| **r).collect();
    Ok(Summary {
        scenario: scenario.to_string(),
        seed,
        duration_s,
        warmup_s,
        invocations_total: invocations.len() as u64,
        invocations_counted: counted.len() as u64,
        paths,
        startup: DurationStats::from_samples(&collect(&all, |r| r.startup_ms))
            .expect("counted non-empty"),
        e2e: DurationStats::from_samples(&collect(&all, |r| r.e2e_ms)).expect("counted non-empty"),
        functions,
        peak_memory_bytes: memory.iter().map(|m| m.total_bytes()).max().unwrap_or(0),
        peak_pool_bytes: memory.iter().map(|m| m.pool_bytes).max().unwrap_or(0),
        fault_counters,
    })
}

/// Render metrics.jsonl: one compact JSON object per line.
pub fn render_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization"));
        out.push('\n');
    }
    out
}

/// Parse metrics.jsonl.
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

pub fn render_summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serialization");
    s.push('\n');
    s
}

/// Per-function end-to-end latency CDFs over counted invocations. Within a
/// function the fraction is nondecreasing and the last row reaches 1.
pub fn render_cdf_csv(records: &[MetricsRecord], warmup_s: f64) -> String {
    let (invocations, _) = partition(records);
    let warmup_ms = warmup_s * 1000.0;
    let mut by_function: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in invocations.into_iter().filter(|r| r.time_ms >= warmup_ms) {
        by_function.entry(&r.function_id).or_default().push(r.e2e_ms);
    }
    let mut out = String::from("function_id,latency_ms,cumulative_fraction\n");
    for (id, mut values) in by_function {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        for (i, v) in values.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", id, v, (i + 1) as f64 / n as f64));
        }
    }
    out
}

/// Everything one run produces, ready to write to an output directory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

impl RunOutput {
    /// Write metrics.jsonl, summary.json, and cdf.csv under `dir`,
    /// creating it if needed.
    pub fn write_to_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.jsonl"), render_jsonl(&self.records))?;
        std::fs::write(dir.join("summary.json"), render_summary_json(&self.summary))?;
        std::fs::write(dir.join("cdf.csv"), render_cdf_csv(&self.records, self.summary.warmup_s))?;
        Ok(())
    }
}

/// Recompute the summary from the records and require equality. Catches any
/// drift between streaming aggregation and the written artifacts.
pub fn verify_consistency(summary: &Summary, records: &[MetricsRecord]) -> Result<(), ReportError> {
    let rebuilt = build_summary(
        &summary.scenario,
        summary.seed,
        summary.duration_s,
        summary.warmup_s,
        records,
        summary.fault_counters.clone(),
    )?;
    if &rebuilt != summary {
        return Err(ReportError::Inconsistent(format!(
            "rebuilt summary differs (counted {} vs {})",
            rebuilt.invocations_counted, summary.invocations_counted
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn record(t_s: f64, function: &str, startup: f64, exec: f64) -> MetricsRecord {
        MetricsRecord::Invocation(InvocationRecord {
            time_ms: round_us(t_s * 1000.0),
            function_id: function.to_string(),
            instance_id: 1,
            path: PathKind::Repurposed,
            startup_ms: round_us(startup),
            startup_breakdown: BTreeMap::new(),
            exec_ms: round_us(exec),
            e2e_ms: round_us(startup + exec),
        })
    }

    fn memory(t_s: f64, private: u64) -> MetricsRecord {
        MetricsRecord::Memory(MemorySample {
            time_ms: round_us(t_s * 1000.0),
            private_bytes: private,
            pool_bytes: private / 2,
            page_cache_bytes: 0,
            sandbox_overhead_bytes: 10,
        })
    }

    #[test]
    fn rounding_keeps_microsecond_precision() {
        assert_eq!(round_us(1.2345678), 1.235);
        assert_eq!(round_us(0.0004), 0.0);
        assert_eq!(round_us(1700.0), 1700.0);
    }

    #[test]
    fn warmup_records_counted_but_not_summarized() {
        let records = vec![
            record(10.0, "f", 1000.0, 10.0),
            record(400.0, "f", 5.0, 10.0),
            record(500.0, "f", 7.0, 10.0),
        ];
        let s = build_summary("t", 1, 600.0, 300.0, &records, BTreeMap::new()).unwrap();
        assert_eq!(s.invocations_total, 3);
        assert_eq!(s.invocations_counted, 2);
        // The warmup record's 1 s startup never reaches the stats.
        assert_eq!(s.startup.max_ms, 7.0);
        assert_eq!(s.functions["f"].invocations, 2);
    }

    #[test]
    fn no_post_warmup_samples_is_an_error() {
        let records = vec![record(10.0, "f", 1.0, 1.0)];
        assert_eq!(
            build_summary("t", 1, 600.0, 300.0, &records, BTreeMap::new()),
            Err(ReportError::NoSamples)
        );
    }

    #[test]
    fn peak_memory_is_the_series_maximum_including_warmup() {
        let records = vec![
            memory(10.0, 5000),
            record(400.0, "f", 1.0, 1.0),
            memory(450.0, 4000),
            memory(500.0, 1000),
        ];
        let s = build_summary("t", 1, 600.0, 300.0, &records, BTreeMap::new()).unwrap();
        assert_eq!(s.peak_memory_bytes, 5000 + 2500 + 10);
        assert_eq!(s.peak_pool_bytes, 2500);
    }

    #[test]
    fn summary_survives_a_jsonl_round_trip_and_recheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut records = Vec::new();
        for i in 0..500 {
            let f = ["a", "b", "c"][i % 3];
            let t = 200.0 + i as f64 * 2.0;
            records.push(record(t, f, rng.gen_range(1.0..100.0), rng.gen_range(5.0..50.0)));
            if i % 50 == 0 {
                records.push(memory(t, rng.gen_range(1_000..1_000_000)));
            }
        }
        let summary = build_summary("rt", 7, 1400.0, 300.0, &records, BTreeMap::new()).unwrap();

        let parsed = parse_jsonl(&render_jsonl(&records)).unwrap();
        assert_eq!(parsed, records, "jsonl round trip is lossless");
        verify_consistency(&summary, &parsed).unwrap();

        // Same inputs, same bytes.
        let again = build_summary("rt", 7, 1400.0, 300.0, &parsed, BTreeMap::new()).unwrap();
        assert_eq!(render_summary_json(&again), render_summary_json(&summary));

        // Percentiles match a brute-force recomputation from the records.
        let mut startups: Vec<f64> = parsed
            .iter()
            .filter_map(|r| match r {
                MetricsRecord::Invocation(i) if i.time_ms >= 300_000.0 => Some(i.startup_ms),
                _ => None,
            })
            .collect();
        startups.sort_by(f64::total_cmp);
        let p99 = startups[((0.99 * startups.len() as f64).ceil() as usize).max(1) - 1];
        assert_eq!(summary.startup.p99_ms, p99);
    }

    #[test]
    fn consistency_check_rejects_tampering() {
        let records =
            vec![record(400.0, "f", 5.0, 10.0), record(500.0, "f", 9.0, 10.0)];
        let mut summary =
            build_summary("t", 1, 600.0, 300.0, &records, BTreeMap::new()).unwrap();
        summary.startup.p99_ms = 1.0;
        assert!(verify_consistency(&summary, &records).is_err());
    }

    #[test]
    fn cdf_is_monotone_per_function_and_ends_at_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut records = Vec::new();
        for i in 0..101 {
            records.push(record(
                350.0 + i as f64,
                ["f", "g"][i % 2],
                rng.gen_range(0.5..50.0),
                rng.gen_range(1.0..400.0),
            ));
        }
        let csv = render_cdf_csv(&records, 300.0);
        assert!(csv.starts_with("function_id,latency_ms,cumulative_fraction\n"));
        let mut last: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for line in csv.lines().skip(1) {
            let mut parts = line.split(',');
            let id = parts.next().unwrap().to_string();
            let value: f64 = parts.next().unwrap().parse().unwrap();
            let frac: f64 = parts.next().unwrap().parse().unwrap();
            if let Some((pv, pf)) = last.get(&id) {
                assert!(value >= *pv, "latencies sorted within function");
                assert!(frac >= *pf, "fractions nondecreasing");
            }
            last.insert(id, (value, frac));
        }
        assert_eq!(last.len(), 2);
        for (_, (_, frac)) in last {
            assert_eq!(frac, 1.0);
        }
    }
}
