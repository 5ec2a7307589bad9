//! Deterministic discrete-event simulation of engine pools serving a workflow.
//!
//! The loop pops events in `(time, seq)` order. Every batch change on an LLM
//! engine first brings its decode progress up to the current time, then
//! applies the change and schedules a fresh completion event tagged with the
//! engine's version; older completion events are dropped when they fire.

pub mod event;
pub mod metrics;
pub mod trace;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{tool_service_time, EngineError, EngineId, EngineParams, EngineState, PoolId, ToolPoolParams};
use crate::rng::{substream, Stream};
use crate::scheduler::{
    admission_decision, autoscale_tick, return_borrowed, route_call, select_next, should_return, try_borrow, Admission,
    CallWork, PolicyConfig, PolicyError, PoolLoad, QueuedCall, ScaleDecision, WindowStats,
};
use crate::workflow::{
    validate_workflow, Next, RemainingWork, RequestState, ServiceEstimates, StageId, StageRecord, StageWork, Terminal,
    ValidatedWorkflow, WorkflowError, WorkflowSpec,
};
use crate::workloads::{
    baseline_key, build_topology, KeyContext, PoolKindLayout, PoolMode, TopologyError, TopologyPreset,
};

use event::{EventKind, EventQueue};
use metrics::{latency_summary, EngineMetrics, MetricsReport, PoolMetrics};
use trace::{DispatchRecord, KeyFields, KvSample, QueueSample, RequestOutcome, RequestRecord, Traces};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalConfig {
    /// Poisson arrival rate in requests/second.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub workflow: WorkflowSpec,
    pub topology: TopologyPreset,
    pub policy: PolicyConfig,
    pub arrivals: ArrivalConfig,
    pub duration: f64,
    /// Requests arriving before this time are simulated but not measured.
    pub warmup: f64,
    pub seed: u64,
    /// Period of KV and queue samples.
    pub sample_interval: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("ConfigError: {0}")]
    Config(#[from] ConfigError),
    #[error("InternalInvariantViolation at t={time:.9}: {detail}")]
    Invariant { time: f64, detail: String },
}

impl SimConfig {
    pub fn validate(&self) -> Result<ValidatedWorkflow, ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return invalid("duration must be a non-negative number");
        }
        if !(self.warmup.is_finite() && self.warmup >= 0.0 && self.warmup <= self.duration) {
            return invalid("warmup must satisfy 0 <= warmup <= duration");
        }
        if !(self.arrivals.rate.is_finite() && self.arrivals.rate > 0.0) {
            return invalid("arrival rate must be positive");
        }
        if !(self.sample_interval.is_finite() && self.sample_interval > 0.0) {
            return invalid("sample_interval must be positive");
        }
        self.policy.validate()?;
        let wf = validate_workflow(self.workflow.clone())?;
        build_topology(&self.topology, &wf)?;
        Ok(wf)
    }
}

/// Inverse-CDF exponential sample for a uniform draw `u` in (0, 1].
pub fn interarrival_from_uniform(u: f64, rate: f64) -> f64 {
    -u.ln() / rate
}

pub fn sample_interarrival(rng: &mut Stream, rate: f64) -> f64 {
    // gen() is in [0, 1); flip it so ln never sees zero
    let u = 1.0 - rng.gen::<f64>();
    interarrival_from_uniform(u, rate)
}

/// Mean service seconds per stage: prefill of the mean prompt plus the mean
/// output decoded alone (LLM stages), or the mean tool time.
pub fn static_estimates(wf: &ValidatedWorkflow, params: &EngineParams) -> ServiceEstimates {
    ServiceEstimates::from_vec(
        wf.stages()
            .iter()
            .map(|s| match &s.work {
                StageWork::Llm { prompt_tokens, output_tokens, .. } => {
                    prompt_tokens.mean() / params.prefill_rate + output_tokens.mean() * params.base_token_time
                }
                StageWork::Tool { service_time } => service_time.mean(),
            })
            .collect(),
    )
}

/// Runs one simulation to `duration`.
pub fn run(cfg: &SimConfig) -> Result<(MetricsReport, Traces), SimError> {
    let wf = cfg.validate()?;
    let mut sim = Simulation::new(cfg, wf)?;
    sim.run()?;
    sim.into_report()
}

struct Request {
    state: RequestState,
    measured: bool,
}

enum PoolRtKind {
    Llm { engines: Vec<EngineId>, params: EngineParams },
    Tool { params: ToolPoolParams, busy: usize },
}

#[derive(Default)]
struct PoolAcc {
    measured_dispatches: u64,
    delay_sum: f64,
    max_queue: usize,
    scale_outs: u64,
    scale_ins: u64,
    lent: u64,
    borrowed: u64,
}

struct PoolRt {
    id: PoolId,
    name: String,
    stages: Vec<StageId>,
    kind: PoolRtKind,
    queue: Vec<QueuedCall>,
    window: WindowStats,
    last_util: f64,
    last_scale: Option<f64>,
    acc: PoolAcc,
}

impl PoolRt {
    fn is_llm(&self) -> bool {
        matches!(self.kind, PoolRtKind::Llm { .. })
    }
}

#[derive(Default)]
struct KvAcc {
    sum: f64,
    samples: u64,
    max: u64,
}

struct Simulation<'c> {
    cfg: &'c SimConfig,
    wf: ValidatedWorkflow,
    isolated: bool,
    pools: Vec<PoolRt>,
    stage_pool: Vec<PoolId>,
    engines: Vec<EngineState>,
    alive: Vec<bool>,
    kv_acc: Vec<KvAcc>,
    requests: BTreeMap<u64, Request>,
    events: EventQueue,
    estimates: ServiceEstimates,
    remaining: RemainingWork,
    arrivals_rng: Stream,
    next_request: u64,
    last_integrate: f64,

    arrivals: u64,
    admitted: u64,
    completed: u64,
    failed_budget: u64,
    rejected: u64,
    measured_completed: u64,
    measured_finished: u64,
    measured_violations: u64,
    latencies: Vec<f64>,
    max_stages_per_batch: usize,
    traces: Traces,
}

fn invariant(time: f64, detail: impl ToString) -> SimError {
    SimError::Invariant { time, detail: detail.to_string() }
}

impl<'c> Simulation<'c> {
    fn new(cfg: &'c SimConfig, wf: ValidatedWorkflow) -> Result<Self, SimError> {
        let layout = build_topology(&cfg.topology, &wf).map_err(ConfigError::from)?;
        let mut pools = Vec::with_capacity(layout.len());
        let mut engines = Vec::new();
        let mut stage_pool = vec![PoolId(usize::MAX); wf.stages().len()];
        for (i, l) in layout.into_iter().enumerate() {
            let id = PoolId(i);
            for s in &l.stages {
                stage_pool[s.0] = id;
            }
            let kind = match l.kind {
                PoolKindLayout::Llm { engines: n, params } => {
                    let ids = (0..n)
                        .map(|_| {
                            let eid = EngineId(engines.len());
                            engines.push(EngineState::new(eid, params.clone(), id, 0.0));
                            eid
                        })
                        .collect();
                    PoolRtKind::Llm { engines: ids, params }
                }
                PoolKindLayout::Tool { params } => PoolRtKind::Tool { params, busy: 0 },
            };
            pools.push(PoolRt {
                id,
                name: l.name,
                stages: l.stages,
                kind,
                queue: Vec::new(),
                window: WindowStats::default(),
                last_util: 0.0,
                last_scale: None,
                acc: PoolAcc::default(),
            });
        }
        let estimates = static_estimates(&wf, &cfg.topology.engine);
        let remaining = RemainingWork::build(&wf, &estimates).map_err(ConfigError::from)?;
        let n = engines.len();
        Ok(Self {
            cfg,
            isolated: cfg.topology.mode == PoolMode::Isolated,
            wf,
            pools,
            stage_pool,
            engines,
            alive: vec![true; n],
            kv_acc: (0..n).map(|_| KvAcc::default()).collect(),
            requests: BTreeMap::new(),
            events: EventQueue::new(),
            estimates,
            remaining,
            arrivals_rng: substream(cfg.seed, "arrivals", &[]),
            next_request: 0,
            last_integrate: 0.0,
            arrivals: 0,
            admitted: 0,
            completed: 0,
            failed_budget: 0,
            rejected: 0,
            measured_completed: 0,
            measured_finished: 0,
            measured_violations: 0,
            latencies: Vec::new(),
            max_stages_per_batch: 0,
            traces: Traces::default(),
        })
    }

    fn now(&self) -> f64 {
        self.events.now()
    }

    fn schedule(&mut self, at: f64, kind: EventKind) -> Result<(), SimError> {
        self.events.schedule(at, kind).map_err(|e| invariant(self.now(), e))
    }

    /// Schedules a periodic event unless it would land past the horizon.
    fn schedule_within(&mut self, at: f64, kind: EventKind) -> Result<(), SimError> {
        if at <= self.cfg.duration {
            self.schedule(at, kind)?;
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), SimError> {
        let first = sample_interarrival(&mut self.arrivals_rng, self.cfg.arrivals.rate);
        self.schedule_within(first, EventKind::Arrival)?;
        self.schedule_within(0.0, EventKind::Sample)?;
        let tick = self.cfg.policy.autoscale.check_interval;
        self.schedule_within(tick, EventKind::AutoscaleTick)?;
        if self.cfg.policy.borrow.enabled {
            self.schedule_within(tick, EventKind::BorrowCheck)?;
        }

        let mut last_time = 0.0;
        while let Some(t) = self.events.peek_time() {
            if t > self.cfg.duration {
                break;
            }
            let ev = self.events.pop().expect("peeked");
            if ev.time < last_time {
                return Err(invariant(ev.time, "clock moved backwards"));
            }
            last_time = ev.time;
            self.integrate(ev.time);
            self.handle(ev.kind)?;
            self.check_engines()?;
        }
        Ok(())
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        let now = self.now();
        match kind {
            EventKind::Arrival => self.on_arrival(),
            EventKind::PrefillDone { engine, request } => {
                let e = &mut self.engines[engine.0];
                e.advance_to(now);
                e.finish_prefill(request).map_err(|err| invariant(now, err))?;
                self.reschedule(engine)
            }
            EventKind::CallComplete { engine, version } => {
                if self.engines[engine.0].version != version {
                    return Ok(());
                }
                self.on_call_complete(engine)
            }
            EventKind::ToolComplete { pool, request, started_at } => {
                if let PoolRtKind::Tool { busy, .. } = &mut self.pools[pool.0].kind {
                    *busy -= 1;
                }
                self.complete_stage(request, started_at)?;
                self.dispatch(pool)
            }
            EventKind::AutoscaleTick => {
                self.control_tick()?;
                self.schedule_within(now + self.cfg.policy.autoscale.check_interval, EventKind::AutoscaleTick)
            }
            EventKind::BorrowCheck => {
                self.borrow_check()?;
                self.schedule_within(now + self.cfg.policy.autoscale.check_interval, EventKind::BorrowCheck)
            }
            EventKind::Sample => {
                self.sample();
                self.schedule_within(now + self.cfg.sample_interval, EventKind::Sample)
            }
        }
    }

    /// Accumulates busy and capacity seconds for every pool up to `now`.
    fn integrate(&mut self, now: f64) {
        let dt = now - self.last_integrate;
        self.last_integrate = now;
        if dt <= 0.0 {
            return;
        }
        for p in &mut self.pools {
            if let PoolRtKind::Tool { params, busy } = &p.kind {
                p.window.busy_seconds += *busy as f64 * dt;
                p.window.capacity_seconds += params.concurrency as f64 * dt;
            }
        }
        for (e, alive) in self.engines.iter().zip(&self.alive) {
            if !alive {
                continue;
            }
            let w = &mut self.pools[e.serving_pool().0].window;
            w.capacity_seconds += dt;
            if !e.is_idle() {
                w.busy_seconds += dt;
            }
        }
    }

    fn on_arrival(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let id = self.next_request;
        self.next_request += 1;
        self.arrivals += 1;

        let decision = admission_decision(self.pools.iter().map(|p| p.queue.len()), &self.cfg.policy.admission);
        match decision {
            Admission::Reject => {
                self.rejected += 1;
                self.traces.requests.push(RequestRecord {
                    request: id,
                    arrival: now,
                    done: now,
                    outcome: RequestOutcome::Rejected,
                    latency: 0.0,
                    violated_slo: false,
                });
            }
            Admission::Accept => {
                self.admitted += 1;
                let state = RequestState::new(id, now, &self.wf);
                let entry = self.wf.entry();
                self.requests.insert(id, Request { state, measured: now >= self.cfg.warmup });
                self.enqueue(id, entry)?;
            }
        }
        let next = now + sample_interarrival(&mut self.arrivals_rng, self.cfg.arrivals.rate);
        self.schedule_within(next, EventKind::Arrival)
    }

    fn enqueue(&mut self, id: u64, stage: StageId) -> Result<(), SimError> {
        let now = self.now();
        let seed = self.cfg.seed;
        let visit = self.requests[&id].state.visits(stage);
        let pool_id = self.stage_pool[stage.0];
        let work = match (&self.wf.stage(stage).work, &self.pools[pool_id.0].kind) {
            (StageWork::Llm { prompt_tokens, output_tokens, .. }, _) => {
                let mut rng = substream(seed, "tokens", &[id, stage.0 as u64, visit]);
                let prompt = prompt_tokens.sample_tokens(&mut rng);
                let output = output_tokens.sample_tokens(&mut rng);
                CallWork::Llm { prompt_tokens: prompt, output_tokens: output }
            }
            (StageWork::Tool { .. }, PoolRtKind::Tool { params, .. }) => {
                let mut rng = substream(seed, "service", &[id, stage.0 as u64, visit]);
                CallWork::Tool { service_time: tool_service_time(params, &mut rng) }
            }
            (StageWork::Tool { .. }, PoolRtKind::Llm { .. }) => {
                return Err(invariant(now, format!("tool stage {stage} mapped to an LLM pool")));
            }
        };
        let pool = &mut self.pools[pool_id.0];
        pool.queue.push(QueuedCall { request_id: id, stage, arrival_seq: id, enqueued_at: now, work });
        pool.acc.max_queue = pool.acc.max_queue.max(pool.queue.len());
        self.dispatch(pool_id)
    }

    fn key_fields(&self, id: u64, now: f64) -> KeyFields {
        let state = &self.requests[&id].state;
        let stage = state.current_stage();
        KeyFields {
            slack: state.deadline - now - self.remaining.for_state(state),
            expected_service: stage.map(|s| self.estimates.get(s)).unwrap_or(0.0),
            selectivity: match stage {
                Some(s) if self.cfg.policy.use_selectivity => Some(self.wf.selectivity(s, state.retries_used)),
                _ => None,
            },
            arrival_seq: id,
            attained: state.attained_service(),
        }
    }

    /// Engines that may take new calls for `pool`.
    fn routable(&self, pool: PoolId) -> impl Iterator<Item = &EngineState> {
        self.engines
            .iter()
            .zip(&self.alive)
            .filter(move |(e, alive)| **alive && e.serving_pool() == pool && !e.returning)
            .map(|(e, _)| e)
    }

    /// Drains `pool`'s queue in priority order while the head call fits.
    fn dispatch(&mut self, pool_id: PoolId) -> Result<(), SimError> {
        let now = self.now();
        loop {
            let pool = &self.pools[pool_id.0];
            if pool.queue.is_empty() {
                return Ok(());
            }
            if let PoolRtKind::Tool { params, busy } = &pool.kind {
                if *busy >= params.concurrency {
                    return Ok(());
                }
            }
            let ctx = KeyContext {
                wf: &self.wf,
                remaining: &self.remaining,
                estimates: &self.estimates,
                use_selectivity: self.cfg.policy.use_selectivity,
            };
            let policy = self.cfg.policy.kind;
            let requests = &self.requests;
            let sel = select_next(&pool.queue, |c| baseline_key(policy, &requests[&c.request_id].state, now, &ctx))
                .expect("queue is non-empty");

            let head = &pool.queue[sel.index];
            let engine = match pool.kind {
                PoolRtKind::Llm { .. } => {
                    let call = head
                        .llm_call(self.wf.stage(head.stage).prefix_tokens())
                        .ok_or_else(|| invariant(now, "tool work queued on an LLM pool"))?;
                    match route_call(self.routable(pool_id), &call) {
                        Some(e) => Some((e, call)),
                        None => return Ok(()),
                    }
                }
                PoolRtKind::Tool { .. } => None,
            };

            let runner_up = sel.runner_up.map(|(i, _)| pool.queue[i].request_id);
            let call = self.pools[pool_id.0].queue.remove(sel.index);
            let fields = self.key_fields(call.request_id, now);
            let runner_up = runner_up.map(|id| (id, self.key_fields(id, now)));
            let delay = now - call.enqueued_at;
            let slo = self.cfg.policy.autoscale.queue_delay_slo;
            let warm = now >= self.cfg.warmup;
            let pool = &mut self.pools[pool_id.0];
            pool.window.dispatches += 1;
            if delay > slo {
                pool.window.late_dispatches += 1;
            }
            if warm {
                pool.acc.measured_dispatches += 1;
                pool.acc.delay_sum += delay;
            }
            self.traces.dispatch.push(DispatchRecord {
                time: now,
                pool: pool.name.clone(),
                request: call.request_id,
                stage: self.wf.stage(call.stage).id.clone(),
                policy: self.cfg.policy.kind,
                fields,
                engine: engine.as_ref().map(|(e, _)| e.0),
                queue_delay: delay,
                queue_len: pool.queue.len(),
                runner_up,
            });

            match (engine, call.work) {
                (Some((eid, llm)), _) => {
                    let e = &mut self.engines[eid.0];
                    e.advance_to(now);
                    let done_at = e.admit(&llm, now).map_err(|err| invariant(now, err))?;
                    if done_at > now {
                        self.schedule(done_at, EventKind::PrefillDone { engine: eid, request: call.request_id })?;
                    }
                    self.reschedule(eid)?;
                }
                (None, CallWork::Tool { service_time }) => {
                    if let PoolRtKind::Tool { busy, .. } = &mut self.pools[pool_id.0].kind {
                        *busy += 1;
                    }
                    self.schedule(
                        now + service_time,
                        EventKind::ToolComplete { pool: pool_id, request: call.request_id, started_at: now },
                    )?;
                }
                (None, CallWork::Llm { .. }) => return Err(invariant(now, "LLM work queued on a tool pool")),
            }
        }
    }

    fn reschedule(&mut self, eid: EngineId) -> Result<(), SimError> {
        let now = self.now();
        let e = &self.engines[eid.0];
        if let Some((_, at)) = e.next_completion(now) {
            let version = e.version;
            self.schedule(at.max(now), EventKind::CallComplete { engine: eid, version })?;
        }
        Ok(())
    }

    fn on_call_complete(&mut self, eid: EngineId) -> Result<(), SimError> {
        let now = self.now();
        let e = &mut self.engines[eid.0];
        e.advance_to(now);
        let done = e.take_finished(now);
        let pool = e.serving_pool();
        self.reschedule(eid)?;
        self.maybe_return(eid)?;
        for c in done {
            self.complete_stage(c.request_id, c.started_at)?;
        }
        self.dispatch(pool)
    }

    /// Records the finished stage, draws its outcome and moves the request on.
    fn complete_stage(&mut self, id: u64, started_at: f64) -> Result<(), SimError> {
        let now = self.now();
        let seed = self.cfg.seed;
        let req = self.requests.get_mut(&id).ok_or_else(|| invariant(now, format!("unknown request {id}")))?;
        let stage = req.state.current_stage().ok_or_else(|| invariant(now, format!("request {id} already done")))?;
        let visit = req.state.visits(stage);
        let mut rng = substream(seed, "outcome", &[id, stage.0 as u64, visit]);
        let outcome = self.wf.stage(stage).sample_outcome(&mut rng).label.clone();
        let step = self.wf.next_step(&req.state, &outcome).map_err(|e| invariant(now, e))?;
        req.state.history.push(StageRecord { stage, start: started_at, end: now, outcome });
        req.state.apply(step);

        if let Some(w) = self.cfg.policy.estimate_ewma {
            let observed = now - started_at;
            let old = self.estimates.get(stage);
            self.estimates.set(stage, (1.0 - w) * old + w * observed);
            self.remaining = RemainingWork::build(&self.wf, &self.estimates).map_err(|e| invariant(now, e))?;
        }

        match step.transition {
            Next::Stage(s) => self.enqueue(id, s),
            Next::Done(t) => {
                self.finish(id, t);
                Ok(())
            }
        }
    }

    fn finish(&mut self, id: u64, terminal: Terminal) {
        let now = self.now();
        let Some(req) = self.requests.remove(&id) else { return };
        let latency = now - req.state.arrival_time;
        let violated = latency > self.wf.slo_seconds();
        let outcome = match terminal {
            Terminal::Success => {
                self.completed += 1;
                RequestOutcome::Success
            }
            Terminal::Failure => {
                self.failed_budget += 1;
                RequestOutcome::Failure
            }
        };
        if req.measured {
            self.measured_finished += 1;
            if violated {
                self.measured_violations += 1;
            }
            if terminal == Terminal::Success {
                self.measured_completed += 1;
                self.latencies.push(latency);
            }
        }
        self.traces.requests.push(RequestRecord {
            request: id,
            arrival: req.state.arrival_time,
            done: now,
            outcome,
            latency,
            violated_slo: violated,
        });
    }

    /// Sends a draining lent engine home once its batch is empty.
    fn maybe_return(&mut self, eid: EngineId) -> Result<(), SimError> {
        let e = &self.engines[eid.0];
        if !(e.returning && e.is_idle()) {
            return Ok(());
        }
        let home = e.home_pool;
        if return_borrowed(&mut self.engines[eid.0]) {
            self.dispatch(home)?;
        }
        Ok(())
    }

    fn control_tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let cfg = self.cfg.policy.autoscale.clone();
        for p in &mut self.pools {
            p.window.stale_queued = p.queue.iter().filter(|c| now - c.enqueued_at > cfg.queue_delay_slo).count() as u64;
            p.last_util = p.window.utilization();
        }
        for pi in 0..self.pools.len() {
            let pool_id = PoolId(pi);
            let (count, has_idle) = match &self.pools[pi].kind {
                PoolRtKind::Llm { engines, .. } => {
                    let home: Vec<&EngineState> =
                        engines.iter().map(|e| &self.engines[e.0]).filter(|e| e.lent_to.is_none()).collect();
                    (home.len(), home.iter().any(|e| e.is_idle()))
                }
                PoolRtKind::Tool { params, busy } => (params.concurrency, *busy < params.concurrency),
            };
            let pool = &self.pools[pi];
            let decision = autoscale_tick(&cfg, &pool.window, count, has_idle, pool.last_scale, now);
            match decision {
                ScaleDecision::Hold => continue,
                ScaleDecision::Out => self.scale_out(pool_id),
                ScaleDecision::In => self.scale_in(pool_id),
            }
            let pool = &mut self.pools[pi];
            pool.last_scale = Some(now);
            match decision {
                ScaleDecision::Out => pool.acc.scale_outs += 1,
                _ => pool.acc.scale_ins += 1,
            }
            self.dispatch(pool_id)?;
        }
        for p in &mut self.pools {
            p.window = WindowStats::default();
        }
        Ok(())
    }

    /// Adds one cold engine (or one tool slot).
    fn scale_out(&mut self, pool_id: PoolId) {
        let now = self.now();
        let next_id = EngineId(self.engines.len());
        match &mut self.pools[pool_id.0].kind {
            PoolRtKind::Llm { engines, params } => {
                engines.push(next_id);
                self.engines.push(EngineState::new(next_id, params.clone(), pool_id, now));
                self.alive.push(true);
                self.kv_acc.push(KvAcc::default());
            }
            PoolRtKind::Tool { params, .. } => params.concurrency += 1,
        }
    }

    /// Retires the highest-numbered idle home engine (or one free tool slot).
    fn scale_in(&mut self, pool_id: PoolId) {
        match &mut self.pools[pool_id.0].kind {
            PoolRtKind::Llm { engines, .. } => {
                let victim = engines
                    .iter()
                    .rev()
                    .copied()
                    .find(|e| self.engines[e.0].is_idle() && self.engines[e.0].lent_to.is_none());
                if let Some(v) = victim {
                    engines.retain(|e| *e != v);
                    self.alive[v.0] = false;
                }
            }
            PoolRtKind::Tool { params, busy } => {
                if *busy < params.concurrency && params.concurrency > 1 {
                    params.concurrency -= 1;
                }
            }
        }
    }

    fn borrow_check(&mut self) -> Result<(), SimError> {
        let cfg = self.cfg.policy.borrow.clone();
        for i in 0..self.engines.len() {
            if !self.alive[i] {
                continue;
            }
            let e = &self.engines[i];
            let Some(borrower) = e.lent_to else { continue };
            if !e.returning
                && should_return(&cfg, self.pools[e.home_pool.0].last_util, self.pools[borrower.0].last_util)
            {
                self.engines[i].returning = true;
            }
            self.maybe_return(EngineId(i))?;
        }

        let loads: Vec<PoolLoad> = self
            .pools
            .iter()
            .map(|p| PoolLoad {
                pool: p.id,
                is_llm: p.is_llm(),
                utilization: p.last_util,
                queue_len: p.queue.len(),
                borrow_prefix_tokens: p.stages.iter().map(|s| self.wf.stage(*s).prefix_tokens()).sum(),
            })
            .collect();
        let live: Vec<EngineState> =
            self.engines.iter().zip(&self.alive).filter(|(_, a)| **a).map(|(e, _)| e.clone()).collect();
        if let Some(plan) = try_borrow(&cfg, &loads, &live) {
            self.engines[plan.engine.0].lent_to = Some(plan.borrower);
            self.pools[plan.lender.0].acc.lent += 1;
            self.pools[plan.borrower.0].acc.borrowed += 1;
            self.dispatch(plan.borrower)?;
        }
        Ok(())
    }

    fn sample(&mut self) {
        let now = self.now();
        let warm = now >= self.cfg.warmup;
        for p in &self.pools {
            if let PoolRtKind::Llm { engines, .. } = &p.kind {
                for eid in engines {
                    let e = &self.engines[eid.0];
                    let kv = e.kv_used_at(now);
                    self.traces.kv_usage.push(KvSample {
                        time: now,
                        pool: p.name.clone(),
                        engine: eid.0,
                        kv_used_tokens: kv,
                        resident_prefix_tokens: e.resident_prefix_tokens(),
                        kv_capacity_tokens: e.params.kv_capacity_tokens,
                        serving_pool: self.pools[e.serving_pool().0].name.clone(),
                    });
                    if warm {
                        let acc = &mut self.kv_acc[eid.0];
                        acc.sum += kv as f64;
                        acc.samples += 1;
                        acc.max = acc.max.max(kv);
                    }
                }
            }
        }
        for p in &self.pools {
            let engines = match &p.kind {
                PoolRtKind::Llm { .. } => self.routable(p.id).count(),
                PoolRtKind::Tool { params, .. } => params.concurrency,
            };
            self.traces.queues.push(QueueSample { time: now, pool: p.name.clone(), queue_len: p.queue.len(), engines });
        }
    }

    fn check_engines(&mut self) -> Result<(), SimError> {
        let now = self.now();
        for (e, alive) in self.engines.iter().zip(&self.alive) {
            if !alive {
                continue;
            }
            e.audit().map_err(|err: EngineError| invariant(now, err))?;
            let mix = e.stages_in_batch();
            self.max_stages_per_batch = self.max_stages_per_batch.max(mix);
            if self.isolated && mix > 1 {
                return Err(invariant(now, format!("engine {} co-batches {mix} stages", e.id.0)));
            }
        }
        Ok(())
    }

    fn into_report(self) -> Result<(MetricsReport, Traces), SimError> {
        let window = self.cfg.duration - self.cfg.warmup;
        let (p50, p95, p99, mean) = latency_summary(&self.latencies);
        let pools = self
            .pools
            .iter()
            .map(|p| PoolMetrics {
                pool: p.name.clone(),
                stages: p.stages.iter().map(|s| self.wf.stage(*s).id.clone()).collect(),
                dispatches: p.acc.measured_dispatches,
                mean_queue_delay: if p.acc.measured_dispatches > 0 {
                    p.acc.delay_sum / p.acc.measured_dispatches as f64
                } else {
                    0.0
                },
                max_queue_len: p.acc.max_queue,
                final_queue_len: p.queue.len(),
                engines_at_end: match &p.kind {
                    PoolRtKind::Llm { engines, .. } => engines.len(),
                    PoolRtKind::Tool { params, .. } => params.concurrency,
                },
                scale_outs: p.acc.scale_outs,
                scale_ins: p.acc.scale_ins,
                engines_lent: p.acc.lent,
                engines_borrowed: p.acc.borrowed,
            })
            .collect();
        let engines = self
            .engines
            .iter()
            .zip(&self.kv_acc)
            .map(|(e, acc)| EngineMetrics {
                engine: e.id.0,
                home_pool: self.pools[e.home_pool.0].name.clone(),
                kv_capacity_tokens: e.params.kv_capacity_tokens,
                mean_kv_used: if acc.samples > 0 { acc.sum / acc.samples as f64 } else { 0.0 },
                max_kv_used: acc.max,
            })
            .collect();
        let report = MetricsReport {
            arrivals: self.arrivals,
            arrivals_admitted: self.admitted,
            completed: self.completed,
            failed_budget: self.failed_budget,
            rejected: self.rejected,
            in_flight_at_end: self.requests.len() as u64,
            measured_completed: self.measured_completed,
            latency_p50: p50,
            latency_p95: p95,
            latency_p99: p99,
            latency_mean: mean,
            throughput: if window > 0.0 { self.measured_completed as f64 / window } else { 0.0 },
            slo_violation_rate: if self.measured_finished > 0 {
                self.measured_violations as f64 / self.measured_finished as f64
            } else {
                0.0
            },
            max_stages_per_batch: self.max_stages_per_batch,
            pools,
            engines,
        };
        if !report.conserved() {
            return Err(invariant(self.cfg.duration, "request conservation violated"));
        }
        Ok((report, self.traces))
    }
}
