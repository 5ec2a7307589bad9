//! Stage-local control plane: priority keys, queue selection, locality
//! routing, admission control, engine borrowing and per-pool autoscaling.
//!
//! Everything here is a pure decision over state owned by the simulator.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineId, EngineState, LlmCall, PoolId};
use crate::workflow::{RemainingWork, RequestState, ServiceEstimates, StageId, ValidatedWorkflow};

/// Dispatch priority for the slack-driven policy. Ordered by ascending slack,
/// then ascending expected stage service, then descending selectivity (when
/// present), then arrival order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityKey {
    pub slack: f64,
    pub expected_stage_service: f64,
    pub selectivity: Option<f64>,
    pub arrival_seq: u64,
}

impl Eq for PriorityKey {}

impl Ord for PriorityKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.slack
            .total_cmp(&other.slack)
            .then(self.expected_stage_service.total_cmp(&other.expected_stage_service))
            .then_with(|| match (self.selectivity, other.selectivity) {
                (Some(a), Some(b)) => b.total_cmp(&a),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            })
            .then(self.arrival_seq.cmp(&other.arrival_seq))
    }
}

impl PartialOrd for PriorityKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Queue ordering used by a pool. All entries of one queue carry the same
/// variant; across variants the declaration order decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DispatchKey {
    Fcfs { arrival_seq: u64 },
    LeastAttained { attained: OrdF64, arrival_seq: u64 },
    Slack(PriorityKey),
}

/// `f64` with a total order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Arrival order only.
    Fcfs,
    /// Least attained service at workflow granularity, blind to the graph.
    #[serde(alias = "las")]
    WorkflowAgnosticPriority,
    /// Slack-derived priority keys over the workflow graph.
    StageAware,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Fcfs => "fcfs",
            PolicyKind::WorkflowAgnosticPriority => "workflow_agnostic_priority",
            PolicyKind::StageAware => "stage_aware",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionAction {
    #[default]
    RejectNewWorkflows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmissionConfig {
    pub enabled: bool,
    pub max_queue_len: usize,
    pub action: AdmissionAction,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self { enabled: false, max_queue_len: 32, action: AdmissionAction::RejectNewWorkflows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BorrowConfig {
    pub enabled: bool,
    pub util_low: f64,
    pub util_high: f64,
    pub min_free_kv_tokens: u64,
}

impl Default for BorrowConfig {
    fn default() -> Self {
        Self { enabled: false, util_low: 0.3, util_high: 0.8, min_free_kv_tokens: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoscaleConfig {
    pub enabled: bool,
    /// Control period; also the utilization window used for borrowing.
    pub check_interval: f64,
    pub queue_delay_slo: f64,
    pub scale_out_threshold: f64,
    pub scale_in_threshold: f64,
    pub cooldown: f64,
    pub min_engines: usize,
    pub max_engines: usize,
}

impl Default for AutoscaleConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            check_interval: 5.0,
            queue_delay_slo: 2.0,
            scale_out_threshold: 0.5,
            scale_in_threshold: 0.05,
            cooldown: 10.0,
            min_engines: 1,
            max_engines: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Include stage selectivity in the priority key.
    pub use_selectivity: bool,
    /// Weight of the online exponentially-weighted service estimate; `None`
    /// keeps static per-stage means.
    pub estimate_ewma: Option<f64>,
    pub admission: AdmissionConfig,
    pub borrow: BorrowConfig,
    pub autoscale: AutoscaleConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::StageAware,
            use_selectivity: false,
            estimate_ewma: None,
            admission: AdmissionConfig::default(),
            borrow: BorrowConfig::default(),
            autoscale: AutoscaleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("admission max_queue_len must be at least 1")]
    AdmissionQueueLen,
    #[error("borrow thresholds must satisfy 0 <= util_low < util_high <= 1")]
    BorrowThresholds,
    #[error("autoscale check_interval must be positive")]
    CheckInterval,
    #[error("autoscale thresholds must satisfy scale_in_threshold < scale_out_threshold")]
    ScaleThresholds,
    #[error("autoscale min_engines must be at least 1 and not exceed max_engines")]
    EngineBounds,
    #[error("estimate_ewma weight must lie in (0, 1]")]
    EwmaWeight,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.admission.enabled && self.admission.max_queue_len == 0 {
            return Err(PolicyError::AdmissionQueueLen);
        }
        let b = &self.borrow;
        if !(0.0 <= b.util_low && b.util_low < b.util_high && b.util_high <= 1.0) {
            return Err(PolicyError::BorrowThresholds);
        }
        let a = &self.autoscale;
        if !(a.check_interval.is_finite() && a.check_interval > 0.0) {
            return Err(PolicyError::CheckInterval);
        }
        if a.scale_in_threshold >= a.scale_out_threshold {
            return Err(PolicyError::ScaleThresholds);
        }
        if a.min_engines == 0 || a.min_engines > a.max_engines {
            return Err(PolicyError::EngineBounds);
        }
        if let Some(w) = self.estimate_ewma {
            if !(w > 0.0 && w <= 1.0) {
                return Err(PolicyError::EwmaWeight);
            }
        }
        Ok(())
    }
}

/// Work carried by a queued call, drawn when the call is enqueued.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CallWork {
    Llm { prompt_tokens: u64, output_tokens: u64 },
    Tool { service_time: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedCall {
    pub request_id: u64,
    pub stage: StageId,
    pub arrival_seq: u64,
    pub enqueued_at: f64,
    pub work: CallWork,
}

impl QueuedCall {
    pub fn llm_call(&self, prefix_tokens: u64) -> Option<LlmCall> {
        match self.work {
            CallWork::Llm { prompt_tokens, output_tokens } => Some(LlmCall {
                request_id: self.request_id,
                stage: self.stage,
                prefix_tokens,
                prompt_tokens,
                output_tokens,
            }),
            CallWork::Tool { .. } => None,
        }
    }
}

/// Deadline minus now minus expected remaining service. May be negative.
pub fn compute_slack(req: &RequestState, now: f64, remaining: &RemainingWork) -> f64 {
    req.deadline - now - remaining.for_state(req)
}

pub fn make_priority_key(
    req: &RequestState,
    now: f64,
    wf: &ValidatedWorkflow,
    remaining: &RemainingWork,
    estimates: &ServiceEstimates,
    use_selectivity: bool,
) -> PriorityKey {
    let stage = req.current_stage();
    PriorityKey {
        slack: compute_slack(req, now, remaining),
        expected_stage_service: stage.map(|s| estimates.get(s)).unwrap_or(0.0),
        selectivity: match stage {
            Some(s) if use_selectivity => Some(wf.selectivity(s, req.retries_used)),
            _ => None,
        },
        arrival_seq: req.request_id,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub key: DispatchKey,
    /// Index and key of the smallest call left behind.
    pub runner_up: Option<(usize, DispatchKey)>,
}

/// Picks the queued call with the smallest key. Keys are computed fresh for
/// every call; nothing is removed here.
pub fn select_next<F>(queue: &[QueuedCall], mut key_of: F) -> Option<Selection>
where
    F: FnMut(&QueuedCall) -> DispatchKey,
{
    let mut best: Option<(usize, DispatchKey)> = None;
    let mut second: Option<(usize, DispatchKey)> = None;
    for (i, call) in queue.iter().enumerate() {
        let k = key_of(call);
        match best {
            Some((_, bk)) if k >= bk => {
                if second.is_none_or(|(_, s)| k < s) {
                    second = Some((i, k));
                }
            }
            Some(b) => {
                second = Some(b);
                best = Some((i, k));
            }
            None => best = Some((i, k)),
        }
    }
    best.map(|(index, key)| Selection { index, key, runner_up: second })
}

/// Chooses an engine for `call`: engines with the stage prefix resident win,
/// then the least KV in use, then the lowest id. `None` leaves the call queued.
pub fn route_call<'a, I>(candidates: I, call: &LlmCall) -> Option<EngineId>
where
    I: IntoIterator<Item = &'a EngineState>,
{
    candidates
        .into_iter()
        .filter(|e| e.can_admit_with_eviction(call))
        .min_by_key(|e| (!e.is_resident(call.stage), e.kv_used, e.id))
        .map(|e| e.id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accept,
    Reject,
}

/// Rejects a new workflow when any pool's queue has reached `max_queue_len`.
pub fn admission_decision<I>(queue_lens: I, cfg: &AdmissionConfig) -> Admission
where
    I: IntoIterator<Item = usize>,
{
    if cfg.enabled && queue_lens.into_iter().any(|len| len >= cfg.max_queue_len) {
        Admission::Reject
    } else {
        Admission::Accept
    }
}

/// Per-pool load snapshot at a control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolLoad {
    pub pool: PoolId,
    pub is_llm: bool,
    pub utilization: f64,
    pub queue_len: usize,
    /// Prefix tokens a borrowed engine must materialize for this pool.
    pub borrow_prefix_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BorrowPlan {
    pub engine: EngineId,
    pub lender: PoolId,
    pub borrower: PoolId,
}

/// Finds an idle engine in an underused pool to lend to the busiest hot pool.
/// Lenders always keep at least one engine serving their own queue.
pub fn try_borrow(cfg: &BorrowConfig, loads: &[PoolLoad], engines: &[EngineState]) -> Option<BorrowPlan> {
    if !cfg.enabled {
        return None;
    }
    let borrower = loads
        .iter()
        .filter(|l| l.is_llm && l.utilization > cfg.util_high && l.queue_len > 0)
        .max_by(|a, b| a.queue_len.cmp(&b.queue_len).then(b.pool.cmp(&a.pool)))?;

    let mut lenders: Vec<&PoolLoad> =
        loads.iter().filter(|l| l.is_llm && l.pool != borrower.pool && l.utilization < cfg.util_low).collect();
    lenders.sort_by(|a, b| a.utilization.total_cmp(&b.utilization).then(a.pool.cmp(&b.pool)));

    for lender in lenders {
        let home: Vec<&EngineState> =
            engines.iter().filter(|e| e.home_pool == lender.pool && e.lent_to.is_none()).collect();
        if home.len() < 2 {
            continue;
        }
        let pick = home
            .iter()
            .filter(|e| e.is_idle())
            .find(|e| e.free_kv() >= cfg.min_free_kv_tokens + borrower.borrow_prefix_tokens);
        if let Some(e) = pick {
            return Some(BorrowPlan { engine: e.id, lender: lender.pool, borrower: borrower.pool });
        }
    }
    None
}

/// Whether a lent engine should head home: its home pool got hot or the
/// borrower cooled down.
pub fn should_return(cfg: &BorrowConfig, home_util: f64, borrower_util: f64) -> bool {
    home_util > cfg.util_high || borrower_util < cfg.util_low
}

/// Hands a drained lent engine back to its home pool. Prefixes of the
/// borrowed stage stay resident until an admission needs their room.
/// Returns whether a return happened.
pub fn return_borrowed(engine: &mut EngineState) -> bool {
    if engine.lent_to.is_none() || !engine.is_idle() {
        return false;
    }
    engine.lent_to = None;
    engine.returning = false;
    true
}

/// Dispatch and busy-time counters for one control window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowStats {
    pub dispatches: u64,
    /// Dispatches whose queueing delay exceeded the delay target.
    pub late_dispatches: u64,
    /// Calls still queued at the tick that have already waited too long.
    pub stale_queued: u64,
    pub busy_seconds: f64,
    pub capacity_seconds: f64,
}

impl WindowStats {
    pub fn utilization(&self) -> f64 {
        if self.capacity_seconds > 0.0 {
            (self.busy_seconds / self.capacity_seconds).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn violation_fraction(&self) -> f64 {
        let n = self.dispatches + self.stale_queued;
        if n == 0 {
            0.0
        } else {
            (self.late_dispatches + self.stale_queued) as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleDecision {
    Out,
    In,
    Hold,
}

impl ScaleDecision {
    pub fn delta(self) -> i32 {
        match self {
            ScaleDecision::Out => 1,
            ScaleDecision::In => -1,
            ScaleDecision::Hold => 0,
        }
    }
}

pub fn autoscale_tick(
    cfg: &AutoscaleConfig,
    window: &WindowStats,
    engines: usize,
    has_idle_engine: bool,
    last_scale: Option<f64>,
    now: f64,
) -> ScaleDecision {
    if !cfg.enabled {
        return ScaleDecision::Hold;
    }
    if let Some(t) = last_scale {
        if now - t < cfg.cooldown {
            return ScaleDecision::Hold;
        }
    }
    let frac = window.violation_fraction();
    if frac > cfg.scale_out_threshold && engines < cfg.max_engines {
        ScaleDecision::Out
    } else if frac < cfg.scale_in_threshold && has_idle_engine && engines > cfg.min_engines {
        ScaleDecision::In
    } else {
        ScaleDecision::Hold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EngineParams, ResidentPrefix};
    use proptest::prelude::*;

    fn key(slack: f64, service: f64, sel: Option<f64>, seq: u64) -> PriorityKey {
        PriorityKey { slack, expected_stage_service: service, selectivity: sel, arrival_seq: seq }
    }

    fn qc(id: u64) -> QueuedCall {
        QueuedCall {
            request_id: id,
            stage: StageId(0),
            arrival_seq: id,
            enqueued_at: 0.0,
            work: CallWork::Tool { service_time: 1.0 },
        }
    }

    fn engine(id: usize, cap: u64) -> EngineState {
        let p = EngineParams {
            kv_capacity_tokens: cap,
            prefill_rate: 1000.0,
            base_token_time: 0.02,
            batch_slope: 0.1,
            max_batch: 8,
        };
        EngineState::new(EngineId(id), p, PoolId(0), 0.0)
    }

    fn warm(e: &mut EngineState, stage: usize, tokens: u64) {
        e.resident.push(ResidentPrefix { stage: StageId(stage), tokens, last_used: 0.0 });
        e.kv_used += tokens;
    }

    #[test]
    fn key_ordering_examples() {
        assert!(key(2.0, 9.0, None, 9) < key(5.0, 0.1, None, 0));
        assert!(key(1.0, 0.5, None, 9) < key(1.0, 1.0, None, 0));
        assert!(key(1.0, 1.0, None, 3) < key(1.0, 1.0, None, 4));
        assert!(key(1.0, 1.0, Some(0.9), 4) < key(1.0, 1.0, Some(0.1), 3));
    }

    #[test]
    fn select_next_examples() {
        assert_eq!(select_next(&[], |c| DispatchKey::Fcfs { arrival_seq: c.arrival_seq }), None);

        let queue = vec![qc(1), qc(2)];
        let slack = |c: &QueuedCall| {
            DispatchKey::Slack(key(if c.request_id == 1 { 1.0 } else { -3.0 }, 0.0, None, c.request_id))
        };
        let sel = select_next(&queue, slack).unwrap();
        assert_eq!(sel.index, 1);
        assert_eq!(sel.runner_up, Some((0, DispatchKey::Slack(key(1.0, 0.0, None, 1)))));

        let sel = select_next(&queue[..1], |c| DispatchKey::Fcfs { arrival_seq: c.arrival_seq }).unwrap();
        assert_eq!(sel.index, 0);
        assert_eq!(sel.runner_up, None);
    }

    #[test]
    fn routing_prefers_warm_then_light() {
        let c =
            LlmCall { request_id: 1, stage: StageId(0), prefix_tokens: 1000, prompt_tokens: 100, output_tokens: 50 };
        let mut e1 = engine(1, 10_000);
        warm(&mut e1, 0, 1000);
        let e2 = engine(2, 10_000);
        assert_eq!(route_call([&e1, &e2], &c), Some(EngineId(1)));

        let mut e3 = engine(3, 10_000);
        warm(&mut e3, 0, 1000);
        e1.kv_used += 100;
        e1.resident[0].tokens += 100;
        assert_eq!(route_call([&e1, &e3], &c), Some(EngineId(3)));

        let tiny = engine(4, 10);
        assert_eq!(route_call([&tiny], &c), None);
    }

    #[test]
    fn admission_examples() {
        let cfg = AdmissionConfig { enabled: true, max_queue_len: 10, ..Default::default() };
        assert_eq!(admission_decision([3, 9, 0], &cfg), Admission::Accept);
        assert_eq!(admission_decision([3, 11, 0], &cfg), Admission::Reject);
        let off = AdmissionConfig { enabled: false, ..cfg };
        assert_eq!(admission_decision([1000], &off), Admission::Accept);
    }

    fn loads(gen_util: f64, fix_util: f64, fix_queue: usize) -> Vec<PoolLoad> {
        vec![
            PoolLoad { pool: PoolId(0), is_llm: true, utilization: gen_util, queue_len: 0, borrow_prefix_tokens: 1000 },
            PoolLoad {
                pool: PoolId(1),
                is_llm: true,
                utilization: fix_util,
                queue_len: fix_queue,
                borrow_prefix_tokens: 1000,
            },
        ]
    }

    fn two_gen_engines(cap: u64) -> Vec<EngineState> {
        (0..2).map(|i| engine(i, cap)).collect()
    }

    #[test]
    fn borrow_examples() {
        let cfg = BorrowConfig { enabled: true, ..Default::default() };
        let engines = two_gen_engines(10_000);
        let plan = try_borrow(&cfg, &loads(0.0, 1.0, 10), &engines).unwrap();
        assert_eq!(plan, BorrowPlan { engine: EngineId(0), lender: PoolId(0), borrower: PoolId(1) });

        assert_eq!(try_borrow(&cfg, &loads(0.95, 1.0, 10), &engines), None);

        let small = two_gen_engines(900);
        assert_eq!(try_borrow(&cfg, &loads(0.0, 1.0, 10), &small), None);

        let off = BorrowConfig { enabled: false, ..cfg };
        assert_eq!(try_borrow(&off, &loads(0.0, 1.0, 10), &engines), None);
    }

    #[test]
    fn return_examples() {
        let cfg = BorrowConfig::default();
        assert!(should_return(&cfg, 0.95, 1.0));
        assert!(!should_return(&cfg, 0.0, 1.0));

        let mut e = engine(0, 10_000);
        warm(&mut e, 0, 500);
        warm(&mut e, 1, 700);
        e.lent_to = Some(PoolId(1));
        assert!(return_borrowed(&mut e));
        assert_eq!(e.lent_to, None);
        assert_eq!(e.kv_used, 1200);
        assert!(!return_borrowed(&mut e));

        // the borrowed prefix is only dropped when a home call needs the room
        let big =
            LlmCall { request_id: 1, stage: StageId(0), prefix_tokens: 500, prompt_tokens: 9000, output_tokens: 100 };
        assert!(!e.can_admit(&big));
        assert!(e.can_admit_with_eviction(&big));
        e.admit(&big, 1.0).unwrap();
        assert!(!e.is_resident(StageId(1)));
    }

    #[test]
    fn autoscale_examples() {
        let cfg = AutoscaleConfig { enabled: true, ..Default::default() };
        let hot = WindowStats { dispatches: 10, late_dispatches: 6, ..Default::default() };
        assert_eq!(autoscale_tick(&cfg, &hot, 2, false, None, 100.0), ScaleDecision::Out);
        let cold = WindowStats { dispatches: 10, ..Default::default() };
        assert_eq!(autoscale_tick(&cfg, &cold, 2, true, None, 100.0), ScaleDecision::In);
        assert_eq!(autoscale_tick(&cfg, &hot, 2, false, Some(95.0), 100.0), ScaleDecision::Hold);
        assert_eq!(autoscale_tick(&cfg, &cold, 1, true, None, 100.0), ScaleDecision::Hold);
        assert_eq!(autoscale_tick(&cfg, &hot, 8, false, None, 100.0), ScaleDecision::Hold);
    }

    fn arb_key() -> impl Strategy<Value = PriorityKey> {
        (
            prop_oneof![Just(0.0), Just(1.0), -10.0..10.0f64],
            prop_oneof![Just(0.5), 0.0..5.0f64],
            proptest::option::of(prop_oneof![Just(0.5), 0.0..1.0f64]),
            0u64..4,
        )
            .prop_map(|(slack, s, sel, seq)| key(slack, s, sel, seq))
    }

    proptest! {
        #[test]
        fn key_order_is_antisymmetric(a in arb_key(), b in arb_key()) {
            prop_assert_eq!(a.cmp(&b), b.cmp(&a).reverse());
            if a.cmp(&b) == Ordering::Equal {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn key_order_is_transitive(a in arb_key(), b in arb_key(), c in arb_key()) {
            if a <= b && b <= c {
                prop_assert!(a <= c);
            }
        }

        #[test]
        fn selection_is_minimal(keys in proptest::collection::vec(arb_key(), 1..20)) {
            let queue: Vec<QueuedCall> = (0..keys.len() as u64).map(qc).collect();
            let sel = select_next(&queue, |c| DispatchKey::Slack(keys[c.request_id as usize])).unwrap();
            for k in &keys {
                prop_assert!(sel.key <= DispatchKey::Slack(*k));
            }
            if let Some((i, r)) = sel.runner_up {
                prop_assert!(i != sel.index);
                prop_assert!(sel.key <= r);
                for (j, k) in keys.iter().enumerate() {
                    if j != sel.index {
                        prop_assert!(r <= DispatchKey::Slack(*k));
                    }
                }
            }
        }
    }
}
