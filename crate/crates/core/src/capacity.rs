//! Closed-form throughput estimate for a configuration.
//!
//! Each pool is treated as a set of call slots: an LLM engine holds up to
//! `b*` calls at once, where `b*` is the smaller of `max_batch` and what fits
//! in KV next to the pool's prefixes, and a call occupies its slot for its
//! prefill plus its mean output decoded at batch `b*`.

use serde::Serialize;

use crate::sim::{ConfigError, SimConfig};
use crate::workflow::{expected_visits, StageWork};
use crate::workloads::{build_topology, PoolKindLayout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolCapacity {
    pub pool: String,
    /// Concurrent call slots across the pool.
    pub slots: f64,
    /// Slot-seconds one request consumes in this pool.
    pub work_per_request: f64,
    /// Requests/second the pool can sustain alone.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityEstimate {
    pub pools: Vec<PoolCapacity>,
    pub bottleneck: String,
    /// Requests/second at the bottleneck.
    pub rate: f64,
}

pub fn estimate_capacity(cfg: &SimConfig) -> Result<CapacityEstimate, ConfigError> {
    let wf = cfg.validate()?;
    let visits = expected_visits(&wf);
    let layout = build_topology(&cfg.topology, &wf)?;
    let mut pools = Vec::with_capacity(layout.len());
    for pool in layout {
        let (slots, work) = match &pool.kind {
            PoolKindLayout::Llm { engines, params } => {
                let mut calls = 0.0;
                let mut tokens = 0.0;
                let mut prefixes = 0;
                for s in &pool.stages {
                    let stage = wf.stage(*s);
                    prefixes += stage.prefix_tokens();
                    if let StageWork::Llm { prompt_tokens, output_tokens, .. } = &stage.work {
                        calls += visits[s.0];
                        tokens += visits[s.0] * (prompt_tokens.mean() + output_tokens.mean());
                    }
                }
                let per_call = if calls > 0.0 { tokens / calls } else { 0.0 };
                let room = params.kv_capacity_tokens.saturating_sub(prefixes) as f64;
                let fit = if per_call > 0.0 { (room / per_call).floor() as usize } else { params.max_batch };
                let b = fit.clamp(1, params.max_batch);
                let work: f64 = pool
                    .stages
                    .iter()
                    .map(|s| match &wf.stage(*s).work {
                        StageWork::Llm { prompt_tokens, output_tokens, .. } => {
                            visits[s.0]
                                * (prompt_tokens.mean() / params.prefill_rate
                                    + output_tokens.mean() * params.token_time(b))
                        }
                        StageWork::Tool { .. } => 0.0,
                    })
                    .sum();
                ((engines * b) as f64, work)
            }
            PoolKindLayout::Tool { params } => {
                let work: f64 = pool.stages.iter().map(|s| visits[s.0] * params.service_time.mean()).sum();
                (params.concurrency as f64, work)
            }
        };
        let rate = if work > 0.0 { slots / work } else { f64::INFINITY };
        pools.push(PoolCapacity { pool: pool.name, slots, work_per_request: work, rate });
    }
    let best = pools
        .iter()
        .min_by(|a, b| a.rate.total_cmp(&b.rate))
        .ok_or_else(|| ConfigError::Invalid("topology has no pools".into()))?;
    Ok(CapacityEstimate { bottleneck: best.pool.clone(), rate: best.rate, pools })
}
