//! Agent run cost accounting: LLM token cost, serverless execution cost
//! billed on allocation, and the relative-cost report.

use serde::{Deserialize, Serialize};

use crate::workload::AgentProfile;

/// Prices. LLM token prices have no sane default and must come from
/// config; the serverless rate defaults to the going per-ms-per-GB
/// list price.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSheet {
    /// $ per input token.
    pub p_in: f64,
    /// $ per output token.
    pub p_out: f64,
    /// $ per millisecond per GB allocated.
    #[serde(default = "default_p_s")]
    pub p_s: f64,
}

fn default_p_s() -> f64 {
    1.67e-8
}

pub fn llm_cost(l_in: u64, l_out: u64, prices: &PriceSheet) -> f64 {
    l_in as f64 * prices.p_in + l_out as f64 * prices.p_out
}

pub fn serverless_cost(t_ms: f64, mem_gb: f64, prices: &PriceSheet) -> f64 {
    t_ms * prices.p_s * mem_gb
}

/// Threshold above which serverless cost counts as a significant share of
/// the LLM cost.
pub const SIGNIFICANT_RATIO: f64 = 0.4;

#[derive(Debug, Clone, Serialize)]
pub struct AgentCostRow {
    pub agent_id: String,
    pub llm_cost: f64,
    pub serverless_cost: f64,
    /// `None` when the LLM cost is zero: the ratio is undefined, never
    /// infinity.
    pub ratio: Option<f64>,
    pub flagged: bool,
}

/// Per-agent serverless-to-LLM cost ratios at the given prices. Serverless
/// time is the agent's end-to-end latency; memory is billed at allocation.
pub fn relative_cost_report(agents: &[AgentProfile], prices: &PriceSheet) -> Vec<AgentCostRow> {
    agents
        .iter()
        .map(|a| {
            let c_llm = llm_cost(a.input_tokens, a.output_tokens, prices);
            let c_s = serverless_cost(a.e2e_base_s * 1000.0, a.alloc_gb, prices);
            let ratio = if c_llm > 0.0 { Some(c_s / c_llm) } else { None };
            AgentCostRow {
                agent_id: a.id.clone(),
                llm_cost: c_llm,
                serverless_cost: c_s,
                ratio,
                flagged: ratio.is_some_and(|r| r >= SIGNIFICANT_RATIO),
            }
        })
        .collect()
}

/// The report as CSV, `ratio` column showing `undefined` for zero LLM
/// cost.
pub fn report_csv(rows: &[AgentCostRow]) -> String {
    let mut out = String::from("agent_id,llm_cost,serverless_cost,ratio,flagged\n");
    for r in rows {
        let ratio = match r.ratio {
            Some(v) => format!("{v:.6}"),
            None => "undefined".to_string(),
        };
        out.push_str(&format!(
            "{},{:.10},{:.10},{},{}\n",
            r.agent_id, r.llm_cost, r.serverless_cost, ratio, r.flagged
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::default_agent_catalog;
    use proptest::prelude::*;

    fn prices(p_in: f64, p_out: f64, p_s: f64) -> PriceSheet {
        PriceSheet { p_in, p_out, p_s }
    }

    #[test]
    fn blackjack_serverless_cost_is_exact() {
        let p = prices(1e-6, 4e-6, 1.67e-8);
        let c = serverless_cost(3200.0, 2.0, &p);
        assert!((c - 1.0688e-4).abs() / 1.0688e-4 < 1e-12, "{c}");
    }

    #[test]
    fn map_reduce_serverless_cost_is_exact() {
        let p = prices(0.0, 0.0, 1.67e-8);
        let c = serverless_cost(56_500.0, 2.0, &p);
        assert!((c - 1.8871e-3).abs() / 1.8871e-3 < 1e-12, "{c}");
    }

    #[test]
    fn bug_fixer_llm_cost_is_exact() {
        let p = prices(1e-6, 4e-6, 1.67e-8);
        let c = llm_cost(1557, 530, &p);
        assert!((c - 3.677e-3).abs() / 3.677e-3 < 1e-12, "{c}");
    }

    #[test]
    fn zero_prices_and_zero_time_give_zero() {
        let p = prices(0.0, 0.0, 0.0);
        assert_eq!(llm_cost(100, 100, &p), 0.0);
        assert_eq!(serverless_cost(0.0, 2.0, &prices(0.0, 0.0, 1.67e-8)), 0.0);
    }

    #[test]
    fn costs_are_linear_in_tokens() {
        let p = prices(3e-6, 7e-6, 1.67e-8);
        assert_eq!(llm_cost(2 * 123, 2 * 77, &p), 2.0 * llm_cost(123, 77, &p));
    }

    #[test]
    fn zero_llm_cost_reports_undefined_not_infinite() {
        let rows = relative_cost_report(&default_agent_catalog(), &prices(0.0, 0.0, 1.67e-8));
        for r in &rows {
            assert!(r.ratio.is_none());
            assert!(!r.flagged);
            assert!(r.serverless_cost > 0.0);
        }
        let csv = report_csv(&rows);
        assert!(csv.contains("undefined"));
    }

    #[test]
    fn zero_serverless_price_gives_zero_ratios() {
        let rows = relative_cost_report(&default_agent_catalog(), &prices(1e-6, 4e-6, 0.0));
        for r in &rows {
            assert_eq!(r.ratio, Some(0.0));
            assert!(!r.flagged);
        }
    }

    #[test]
    fn cheap_llm_prices_push_an_agent_past_seventy_percent() {
        // At these prices Blackjack's serverless share reaches ~0.72.
        let rows = relative_cost_report(&default_agent_catalog(), &prices(8.8e-8, 0.0, 1.67e-8));
        let bj = rows.iter().find(|r| r.agent_id == "blackjack").unwrap();
        let ratio = bj.ratio.unwrap();
        assert!((0.69..=0.75).contains(&ratio), "{ratio}");
        assert!(bj.flagged);
    }

    proptest! {
        // Scaling all prices scales costs and leaves ratios unchanged.
        #[test]
        fn price_homogeneity(k in 1e-3f64..1e3) {
            let base = prices(1e-6, 4e-6, 1.67e-8);
            let scaled = prices(base.p_in * k, base.p_out * k, base.p_s * k);
            let agents = default_agent_catalog();
            let a = relative_cost_report(&agents, &base);
            let b = relative_cost_report(&agents, &scaled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y.llm_cost - k * x.llm_cost).abs() <= 1e-9 * y.llm_cost.abs().max(1e-30));
                prop_assert!((y.serverless_cost - k * x.serverless_cost).abs() <= 1e-9 * y.serverless_cost.abs().max(1e-30));
                let (rx, ry) = (x.ratio.unwrap(), y.ratio.unwrap());
                prop_assert!((rx - ry).abs() <= 1e-9 * rx.abs().max(1e-30));
                prop_assert_eq!(x.flagged, y.flagged);
            }
        }

        #[test]
        fn costs_never_negative(l_in in 0u64..1_000_000, l_out in 0u64..1_000_000, t in 0.0f64..1e7) {
            let p = prices(1e-6, 4e-6, 1.67e-8);
            prop_assert!(llm_cost(l_in, l_out, &p) >= 0.0);
            prop_assert!(serverless_cost(t, 2.0, &p) >= 0.0);
        }
    }
}
