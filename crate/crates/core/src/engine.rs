//! LLM engine and tool executor models.
//!
//! An LLM engine holds a KV budget in tokens. Stage prefixes stay resident
//! across calls; each in-flight call holds its prompt plus the tokens it has
//! generated so far. Decode runs as one continuous batch whose per-token
//! latency grows linearly with batch size: `t(b) = t0 * (1 + alpha * (b - 1))`.

use serde::{Deserialize, Serialize};

use crate::dist::Dist;
use crate::rng::Stream;
use crate::workflow::StageId;

/// Fractional progress within this many tokens of the target counts as done.
const PROGRESS_SNAP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EngineId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoolId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineParams {
    pub kv_capacity_tokens: u64,
    /// Prefill throughput in tokens/second.
    pub prefill_rate: f64,
    /// Seconds per decoded token at batch size 1.
    pub base_token_time: f64,
    /// Per-extra-call slowdown of a decode step.
    pub batch_slope: f64,
    pub max_batch: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid engine params: {0}")]
    InvalidParams(&'static str),
    #[error("AdmitWithoutCapacity: engine {engine} cannot admit request {request}")]
    AdmitWithoutCapacity { engine: usize, request: u64 },
    #[error("PrefixInUse: stage {stage} has active calls on engine {engine}")]
    PrefixInUse { engine: usize, stage: StageId },
    #[error("UnknownCall: request {request} is not in flight on engine {engine}")]
    UnknownCall { engine: usize, request: u64 },
    #[error("accounting drift on engine {engine}: cached {cached}, recomputed {recomputed}")]
    Accounting { engine: usize, cached: u64, recomputed: u64 },
    #[error("capacity breach on engine {engine}: {used} > {capacity}")]
    Capacity { engine: usize, used: u64, capacity: u64 },
    #[error("batch overflow on engine {engine}: {size} > {max}")]
    BatchOverflow { engine: usize, size: usize, max: usize },
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.kv_capacity_tokens == 0 {
            return Err(EngineError::InvalidParams("kv_capacity_tokens must be positive"));
        }
        if !(self.prefill_rate.is_finite() && self.prefill_rate > 0.0) {
            return Err(EngineError::InvalidParams("prefill_rate must be positive"));
        }
        if !(self.base_token_time.is_finite() && self.base_token_time > 0.0) {
            return Err(EngineError::InvalidParams("base_token_time must be positive"));
        }
        if !(self.batch_slope.is_finite() && self.batch_slope >= 0.0) {
            return Err(EngineError::InvalidParams("batch_slope must be non-negative"));
        }
        if self.max_batch == 0 {
            return Err(EngineError::InvalidParams("max_batch must be at least 1"));
        }
        Ok(())
    }

    /// Seconds per token for every call in a decode batch of size `b`.
    pub fn token_time(&self, b: usize) -> f64 {
        let extra = b.saturating_sub(1) as f64;
        self.base_token_time * (1.0 + self.batch_slope * extra)
    }
}

/// An LLM call waiting for, or handed to, an engine.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmCall {
    pub request_id: u64,
    pub stage: StageId,
    pub prefix_tokens: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InFlightCall {
    pub request_id: u64,
    pub stage: StageId,
    pub prompt_tokens: u64,
    pub target_output_tokens: u64,
    /// Exact fractional decode progress.
    pub progress: f64,
    pub phase: Phase,
    pub started_at: f64,
}

impl InFlightCall {
    /// Whole tokens emitted so far.
    pub fn tokens_emitted(&self) -> u64 {
        ((self.progress + 1e-9).floor() as u64).min(self.target_output_tokens)
    }

    pub fn remaining(&self) -> f64 {
        (self.target_output_tokens as f64 - self.progress).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidentPrefix {
    pub stage: StageId,
    pub tokens: u64,
    pub last_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub id: EngineId,
    pub params: EngineParams,
    pub resident: Vec<ResidentPrefix>,
    pub active: Vec<InFlightCall>,
    pub kv_used: u64,
    pub home_pool: PoolId,
    pub lent_to: Option<PoolId>,
    /// Set while a lent engine drains before going home.
    pub returning: bool,
    /// Time up to which decode progress has been applied.
    pub clock: f64,
    /// Bumped on every batch change; completion events carry it.
    pub version: u64,
}

impl EngineState {
    pub fn new(id: EngineId, params: EngineParams, home_pool: PoolId, now: f64) -> Self {
        Self {
            id,
            params,
            resident: Vec::new(),
            active: Vec::new(),
            kv_used: 0,
            home_pool,
            lent_to: None,
            returning: false,
            clock: now,
            version: 0,
        }
    }

    /// Pool whose queue this engine currently drains.
    pub fn serving_pool(&self) -> PoolId {
        self.lent_to.unwrap_or(self.home_pool)
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_resident(&self, stage: StageId) -> bool {
        self.resident.iter().any(|p| p.stage == stage)
    }

    pub fn resident_prefix_tokens(&self) -> u64 {
        self.resident.iter().map(|p| p.tokens).sum()
    }

    pub fn free_kv(&self) -> u64 {
        self.params.kv_capacity_tokens.saturating_sub(self.kv_used)
    }

    /// Tokens the engine has promised: current usage plus the not yet
    /// generated output of every in-flight call.
    pub fn kv_committed(&self) -> u64 {
        self.kv_used + self.active.iter().map(|c| c.target_output_tokens - c.tokens_emitted()).sum::<u64>()
    }

    pub fn decode_batch_size(&self) -> usize {
        self.active.iter().filter(|c| c.phase == Phase::Decode).count()
    }

    fn stage_active(&self, stage: StageId) -> bool {
        self.active.iter().any(|c| c.stage == stage)
    }

    /// Distinct stages currently in the batch.
    pub fn stages_in_batch(&self) -> usize {
        let mut stages: Vec<StageId> = self.active.iter().map(|c| c.stage).collect();
        stages.sort();
        stages.dedup();
        stages.len()
    }

    /// KV tokens a call needs here: its prompt and full output, plus its
    /// stage prefix when that prefix is not already resident.
    pub fn kv_demand(&self, call: &LlmCall) -> u64 {
        let prefix = if self.is_resident(call.stage) { 0 } else { call.prefix_tokens };
        call.prompt_tokens + call.output_tokens + prefix
    }

    pub fn can_admit(&self, call: &LlmCall) -> bool {
        self.active.len() < self.params.max_batch
            && self.kv_committed() + self.kv_demand(call) <= self.params.kv_capacity_tokens
    }

    /// Idle prefixes of other stages that may be dropped to fit `call`.
    fn evictable_for(&self, call: &LlmCall) -> u64 {
        self.resident.iter().filter(|p| p.stage != call.stage && !self.stage_active(p.stage)).map(|p| p.tokens).sum()
    }

    /// Like [`can_admit`](Self::can_admit) but allows dropping idle prefixes.
    pub fn can_admit_with_eviction(&self, call: &LlmCall) -> bool {
        if self.active.len() >= self.params.max_batch {
            return false;
        }
        let need = self.kv_committed() + self.kv_demand(call);
        need <= self.params.kv_capacity_tokens + self.evictable_for(call)
    }

    /// Starts `call`. Cold prefixes are materialized and charged; when room is
    /// short, idle prefixes of other stages are evicted oldest first. Returns
    /// the time at which prefill finishes and decoding starts.
    ///
    /// The engine must already be advanced to `now`.
    pub fn admit(&mut self, call: &LlmCall, now: f64) -> Result<f64, EngineError> {
        if !self.can_admit_with_eviction(call) {
            return Err(EngineError::AdmitWithoutCapacity { engine: self.id.0, request: call.request_id });
        }
        while !self.can_admit(call) {
            let victim = self
                .resident
                .iter()
                .filter(|p| p.stage != call.stage && !self.stage_active(p.stage))
                .min_by(|a, b| a.last_used.total_cmp(&b.last_used).then(a.stage.cmp(&b.stage)))
                .map(|p| p.stage);
            match victim {
                Some(stage) => self.evict_idle_prefix(stage)?,
                None => return Err(EngineError::AdmitWithoutCapacity { engine: self.id.0, request: call.request_id }),
            }
        }

        let mut cold_tokens = 0;
        match self.resident.iter_mut().find(|p| p.stage == call.stage) {
            Some(p) => p.last_used = now,
            None => {
                cold_tokens = call.prefix_tokens;
                self.resident.push(ResidentPrefix { stage: call.stage, tokens: call.prefix_tokens, last_used: now });
                self.kv_used += call.prefix_tokens;
            }
        }
        self.kv_used += call.prompt_tokens;

        let prefill = (call.prompt_tokens + cold_tokens) as f64 / self.params.prefill_rate;
        self.active.push(InFlightCall {
            request_id: call.request_id,
            stage: call.stage,
            prompt_tokens: call.prompt_tokens,
            target_output_tokens: call.output_tokens,
            progress: 0.0,
            phase: if prefill > 0.0 { Phase::Prefill } else { Phase::Decode },
            started_at: now,
        });
        self.version += 1;
        Ok(now + prefill)
    }

    /// Applies decode progress over `[from, to]` at the current batch size.
    /// The batch must not change inside the interval.
    pub fn advance_decode(&mut self, from: f64, to: f64) {
        let b = self.decode_batch_size();
        if b == 0 || to <= from {
            return;
        }
        let tokens = (to - from) / self.params.token_time(b);
        let mut grown = 0;
        for c in self.active.iter_mut().filter(|c| c.phase == Phase::Decode) {
            let before = c.tokens_emitted();
            let target = c.target_output_tokens as f64;
            c.progress = (c.progress + tokens).min(target);
            if target - c.progress < PROGRESS_SNAP {
                c.progress = target;
            }
            grown += c.tokens_emitted() - before;
        }
        self.kv_used += grown;
    }

    /// Advances decode progress from the engine clock to `now`.
    pub fn advance_to(&mut self, now: f64) {
        let from = self.clock;
        self.advance_decode(from, now);
        if now > self.clock {
            self.clock = now;
        }
    }

    /// KV usage at `now` without mutating the engine.
    pub fn kv_used_at(&self, now: f64) -> u64 {
        let mut probe = self.clone();
        probe.advance_to(now);
        probe.kv_used
    }

    /// Marks a call's prefill finished. Engine must be advanced to `now`.
    pub fn finish_prefill(&mut self, request_id: u64) -> Result<(), EngineError> {
        let call = self
            .active
            .iter_mut()
            .find(|c| c.request_id == request_id)
            .ok_or(EngineError::UnknownCall { engine: self.id.0, request: request_id })?;
        call.phase = Phase::Decode;
        self.version += 1;
        Ok(())
    }

    /// The decode call that will finish first under the current batch, and
    /// when. Ties go to the lowest request id.
    pub fn next_completion(&self, now: f64) -> Option<(u64, f64)> {
        let b = self.decode_batch_size();
        let tt = self.params.token_time(b);
        self.active
            .iter()
            .filter(|c| c.phase == Phase::Decode)
            .min_by(|a, b| a.remaining().total_cmp(&b.remaining()).then(a.request_id.cmp(&b.request_id)))
            .map(|c| (c.request_id, now + c.remaining() * tt))
    }

    /// Removes every decode call that has reached its target and releases its
    /// prompt and generated tokens. Engine must be advanced to `now`.
    pub fn take_finished(&mut self, now: f64) -> Vec<InFlightCall> {
        let (done, keep): (Vec<_>, Vec<_>) =
            self.active.drain(..).partition(|c| c.phase == Phase::Decode && c.remaining() < PROGRESS_SNAP);
        self.active = keep;
        let mut done = done;
        done.sort_by_key(|c| c.request_id);
        for c in &done {
            self.kv_used -= c.prompt_tokens + c.tokens_emitted();
            if let Some(p) = self.resident.iter_mut().find(|p| p.stage == c.stage) {
                p.last_used = now;
            }
        }
        if !done.is_empty() {
            self.version += 1;
        }
        done
    }

    /// Drops a stage prefix that no active call uses. No-op when not resident.
    pub fn evict_idle_prefix(&mut self, stage: StageId) -> Result<(), EngineError> {
        if self.stage_active(stage) {
            return Err(EngineError::PrefixInUse { engine: self.id.0, stage });
        }
        if let Some(pos) = self.resident.iter().position(|p| p.stage == stage) {
            let p = self.resident.remove(pos);
            self.kv_used -= p.tokens;
        }
        Ok(())
    }

    pub fn recompute_kv_used(&self) -> u64 {
        self.resident_prefix_tokens() + self.active.iter().map(|c| c.prompt_tokens + c.tokens_emitted()).sum::<u64>()
    }

    /// Accounting, capacity and batch-bound checks.
    pub fn audit(&self) -> Result<(), EngineError> {
        let recomputed = self.recompute_kv_used();
        if recomputed != self.kv_used {
            return Err(EngineError::Accounting { engine: self.id.0, cached: self.kv_used, recomputed });
        }
        if self.kv_used > self.params.kv_capacity_tokens {
            return Err(EngineError::Capacity {
                engine: self.id.0,
                used: self.kv_used,
                capacity: self.params.kv_capacity_tokens,
            });
        }
        if self.active.len() > self.params.max_batch {
            return Err(EngineError::BatchOverflow {
                engine: self.id.0,
                size: self.active.len(),
                max: self.params.max_batch,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPoolParams {
    pub concurrency: usize,
    pub service_time: Dist,
}

/// One service-time draw for a tool call.
pub fn tool_service_time(params: &ToolPoolParams, rng: &mut Stream) -> f64 {
    params.service_time.sample(rng).max(0.0)
}
