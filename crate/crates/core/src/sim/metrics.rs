//! Run summary and latency statistics.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("EmptySamples: percentile of an empty sample set")]
pub struct EmptySamples;

/// Nearest-rank percentile: the value at 1-based rank `ceil(q/100 * n)` of
/// the sorted samples. `q` in (0, 100].
pub fn percentile(samples: &[f64], q: f64) -> Result<f64, EmptySamples> {
    if samples.is_empty() {
        return Err(EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(nearest_rank_sorted(&sorted, q))
}

fn nearest_rank_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolMetrics {
    pub pool: String,
    pub stages: Vec<String>,
    pub dispatches: u64,
    pub mean_queue_delay: f64,
    pub max_queue_len: usize,
    pub final_queue_len: usize,
    pub engines_at_end: usize,
    pub scale_outs: u64,
    pub scale_ins: u64,
    pub engines_lent: u64,
    pub engines_borrowed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineMetrics {
    pub engine: usize,
    pub home_pool: String,
    pub kv_capacity_tokens: u64,
    /// Mean of the periodic KV samples taken after warmup.
    pub mean_kv_used: f64,
    pub max_kv_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub arrivals: u64,
    pub arrivals_admitted: u64,
    pub completed: u64,
    pub failed_budget: u64,
    pub rejected: u64,
    pub in_flight_at_end: u64,
    /// Successful requests that arrived after warmup.
    pub measured_completed: u64,
    pub latency_p50: f64,
    pub latency_p95: f64,
    pub latency_p99: f64,
    pub latency_mean: f64,
    pub throughput: f64,
    pub slo_violation_rate: f64,
    /// Most distinct stages ever seen in one engine's batch.
    pub max_stages_per_batch: usize,
    pub pools: Vec<PoolMetrics>,
    pub engines: Vec<EngineMetrics>,
}

impl MetricsReport {
    pub fn conserved(&self) -> bool {
        self.arrivals_admitted == self.completed + self.failed_budget + self.in_flight_at_end
            && self.arrivals == self.arrivals_admitted + self.rejected
    }

    pub fn pool(&self, name: &str) -> Option<&PoolMetrics> {
        self.pools.iter().find(|p| p.pool == name)
    }

    /// Scalar metrics by name, in a fixed order.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("arrivals", self.arrivals as f64),
            ("arrivals_admitted", self.arrivals_admitted as f64),
            ("completed", self.completed as f64),
            ("failed_budget", self.failed_budget as f64),
            ("rejected", self.rejected as f64),
            ("in_flight_at_end", self.in_flight_at_end as f64),
            ("measured_completed", self.measured_completed as f64),
            ("latency_p50", self.latency_p50),
            ("latency_p95", self.latency_p95),
            ("latency_p99", self.latency_p99),
            ("latency_mean", self.latency_mean),
            ("throughput", self.throughput),
            ("slo_violation_rate", self.slo_violation_rate),
        ]
    }

    pub fn summary_line(&self) -> String {
        format!(
            "completed={} failed_budget={} rejected={} in_flight={} throughput={:.3}/s p50={:.3}s p95={:.3}s p99={:.3}s slo_violation={:.4}",
            self.completed,
            self.failed_budget,
            self.rejected,
            self.in_flight_at_end,
            self.throughput,
            self.latency_p50,
            self.latency_p95,
            self.latency_p99,
            self.slo_violation_rate
        )
    }
}

/// Latency summary; zeros when there are no samples.
pub(crate) fn latency_summary(latencies: &[f64]) -> (f64, f64, f64, f64) {
    if latencies.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    (nearest_rank_sorted(&sorted, 50.0), nearest_rank_sorted(&sorted, 95.0), nearest_rank_sorted(&sorted, 99.0), mean)
}
