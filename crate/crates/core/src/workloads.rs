//! The NL2SQL workflow, pool topologies and baseline dispatch policies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dist::Dist;
use crate::engine::{EngineParams, ToolPoolParams};
use crate::scheduler::{make_priority_key, DispatchKey, OrdF64, PolicyConfig, PolicyKind};
use crate::sim::{ArrivalConfig, SimConfig};
use crate::workflow::{
    OutcomeSpec, RemainingWork, RequestState, ServiceEstimates, StageId, StageKind, StageSpec, StageWork, Target,
    ValidatedWorkflow, WorkflowSpec,
};

pub const GENERATOR: &str = "generator";
pub const EXECUTOR: &str = "executor";
pub const FIXER: &str = "fixer";

/// Knobs of the generate → execute → fix loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Nl2SqlParams {
    /// Probability an executor attempt fails.
    pub p_fail: f64,
    /// Share of `p_fail` that surfaces as a syntax error.
    pub p_syntax_err: f64,
    /// Share of `p_fail` that surfaces as an empty result.
    pub p_empty_result: f64,
    pub retry_budget: u32,
    pub generator_prefix_tokens: u64,
    pub fixer_prefix_tokens: u64,
    pub generator_prompt_tokens: Dist,
    pub generator_output_tokens: Dist,
    pub fixer_prompt_tokens: Dist,
    pub fixer_output_tokens: Dist,
    pub executor_service_time: Dist,
    pub slo_seconds: f64,
}

impl Default for Nl2SqlParams {
    fn default() -> Self {
        Self {
            p_fail: 0.5,
            p_syntax_err: 0.25,
            p_empty_result: 0.25,
            retry_budget: 3,
            generator_prefix_tokens: 1000,
            fixer_prefix_tokens: 1000,
            generator_prompt_tokens: Dist::Uniform { lo: 100.0, hi: 300.0 },
            generator_output_tokens: Dist::Uniform { lo: 50.0, hi: 150.0 },
            fixer_prompt_tokens: Dist::Uniform { lo: 100.0, hi: 300.0 },
            fixer_output_tokens: Dist::Uniform { lo: 50.0, hi: 150.0 },
            executor_service_time: Dist::Uniform { lo: 0.1, hi: 0.4 },
            slo_seconds: 30.0,
        }
    }
}

impl Nl2SqlParams {
    /// Failure probability split evenly between the two failure outcomes.
    pub fn with_p_fail(mut self, p_fail: f64) -> Self {
        self.p_fail = p_fail;
        self.p_syntax_err = p_fail / 2.0;
        self.p_empty_result = p_fail / 2.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("p_fail {0} is not a probability")]
    FailProbability(f64),
    #[error("failure split {syntax} + {empty} does not sum to p_fail {p_fail}")]
    FailSplit { syntax: f64, empty: f64, p_fail: f64 },
}

/// Generator (LLM) → executor (tool) → {success, syntax_err → fixer,
/// empty_result → fixer}; fixer (LLM) → executor. Both failure edges spend
/// retry budget.
pub fn build_nl2sql(params: &Nl2SqlParams) -> Result<WorkflowSpec, WorkloadError> {
    let p = params.p_fail;
    if !(0.0..=1.0).contains(&p) {
        return Err(WorkloadError::FailProbability(p));
    }
    let valid_share = |x: f64| (0.0..=1.0).contains(&x);
    if !valid_share(params.p_syntax_err)
        || !valid_share(params.p_empty_result)
        || (params.p_syntax_err + params.p_empty_result - p).abs() > 1e-9
    {
        return Err(WorkloadError::FailSplit { syntax: params.p_syntax_err, empty: params.p_empty_result, p_fail: p });
    }
    let outcome = |label: &str, probability: f64, next: Target, retry: bool| OutcomeSpec {
        label: label.into(),
        probability,
        next,
        retry,
    };
    let llm = |id: &str, prefix: u64, prompt: &Dist, output: &Dist| StageSpec {
        id: id.into(),
        kind: StageKind::Llm,
        prefix_tokens: prefix,
        prompt_tokens: Some(prompt.clone()),
        output_tokens: Some(output.clone()),
        service_time: None,
        outcomes: vec![outcome("done", 1.0, Target::Stage(EXECUTOR.into()), false)],
    };
    Ok(WorkflowSpec {
        name: "nl2sql".into(),
        stages: vec![
            llm(
                GENERATOR,
                params.generator_prefix_tokens,
                &params.generator_prompt_tokens,
                &params.generator_output_tokens,
            ),
            StageSpec {
                id: EXECUTOR.into(),
                kind: StageKind::Tool,
                prefix_tokens: 0,
                prompt_tokens: None,
                output_tokens: None,
                service_time: Some(params.executor_service_time.clone()),
                outcomes: vec![
                    outcome("success", 1.0 - p, Target::Success, false),
                    outcome("syntax_err", params.p_syntax_err, Target::Stage(FIXER.into()), true),
                    outcome("empty_result", params.p_empty_result, Target::Stage(FIXER.into()), true),
                ],
            },
            llm(FIXER, params.fixer_prefix_tokens, &params.fixer_prompt_tokens, &params.fixer_output_tokens),
        ],
        entry_stage: GENERATOR.into(),
        retry_budget: params.retry_budget,
        slo_seconds: params.slo_seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// One dedicated pool per LLM stage.
    Isolated,
    /// One pool serving every LLM stage.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyPreset {
    pub mode: PoolMode,
    /// Engines per LLM stage (isolated mode).
    #[serde(default)]
    pub engines: BTreeMap<String, usize>,
    /// Engines in the shared LLM pool (shared mode).
    #[serde(default)]
    pub total_engines: usize,
    #[serde(default = "default_engine_params")]
    pub engine: EngineParams,
    /// Concurrent calls per tool pool.
    #[serde(default = "default_tool_concurrency")]
    pub tool_concurrency: usize,
}

pub fn default_engine_params() -> EngineParams {
    EngineParams {
        kv_capacity_tokens: 32_768,
        prefill_rate: 5000.0,
        base_token_time: 0.02,
        batch_slope: 0.1,
        max_batch: 16,
    }
}

fn default_tool_concurrency() -> usize {
    16
}

impl TopologyPreset {
    pub fn isolated<I, S>(engines: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        Self {
            mode: PoolMode::Isolated,
            engines: engines.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            total_engines: 0,
            engine: default_engine_params(),
            tool_concurrency: default_tool_concurrency(),
        }
    }

    pub fn shared(total_engines: usize) -> Self {
        Self {
            mode: PoolMode::Shared,
            engines: BTreeMap::new(),
            total_engines,
            engine: default_engine_params(),
            tool_concurrency: default_tool_concurrency(),
        }
    }

    /// LLM engines across all pools; paired presets must agree on it.
    pub fn total_llm_engines(&self) -> usize {
        match self.mode {
            PoolMode::Isolated => self.engines.values().sum(),
            PoolMode::Shared => self.total_engines,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolKindLayout {
    Llm { engines: usize, params: EngineParams },
    Tool { params: ToolPoolParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolLayout {
    pub name: String,
    pub stages: Vec<StageId>,
    pub kind: PoolKindLayout,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TopologyError {
    #[error("pool for stage `{0}` has no engines")]
    EmptyPool(String),
    #[error("engine count given for `{0}`, which is not an LLM stage")]
    UnknownStage(String),
    #[error("shared pool needs at least one engine")]
    EmptySharedPool,
    #[error("tool concurrency must be at least 1")]
    ToolConcurrency,
    #[error("engine params: {0}")]
    Engine(#[from] crate::engine::EngineError),
}

/// Lays out pools in stage order. Isolated mode gets one pool per LLM stage;
/// shared mode one pool for all LLM stages. Tool pools are the same in both.
pub fn build_topology(preset: &TopologyPreset, wf: &ValidatedWorkflow) -> Result<Vec<PoolLayout>, TopologyError> {
    preset.engine.validate()?;
    if preset.tool_concurrency == 0 {
        return Err(TopologyError::ToolConcurrency);
    }
    if preset.mode == PoolMode::Isolated {
        if let Some(name) = preset.engines.keys().find(|k| wf.stage_id(k).is_none_or(|s| !wf.stage(s).is_llm())) {
            return Err(TopologyError::UnknownStage(name.clone()));
        }
    }
    let llm_stages: Vec<StageId> = wf.stage_ids().filter(|s| wf.stage(*s).is_llm()).collect();
    let mut pools = Vec::new();
    let mut shared_placed = false;
    for s in wf.stage_ids() {
        let stage = wf.stage(s);
        match &stage.work {
            StageWork::Llm { .. } => match preset.mode {
                PoolMode::Isolated => {
                    let n = preset.engines.get(&stage.id).copied().unwrap_or(0);
                    if n == 0 {
                        return Err(TopologyError::EmptyPool(stage.id.clone()));
                    }
                    pools.push(PoolLayout {
                        name: stage.id.clone(),
                        stages: vec![s],
                        kind: PoolKindLayout::Llm { engines: n, params: preset.engine.clone() },
                    });
                }
                PoolMode::Shared if !shared_placed => {
                    if preset.total_engines == 0 {
                        return Err(TopologyError::EmptySharedPool);
                    }
                    shared_placed = true;
                    pools.push(PoolLayout {
                        name: "llm".into(),
                        stages: llm_stages.clone(),
                        kind: PoolKindLayout::Llm { engines: preset.total_engines, params: preset.engine.clone() },
                    });
                }
                PoolMode::Shared => {}
            },
            StageWork::Tool { service_time } => pools.push(PoolLayout {
                name: stage.id.clone(),
                stages: vec![s],
                kind: PoolKindLayout::Tool {
                    params: ToolPoolParams { concurrency: preset.tool_concurrency, service_time: service_time.clone() },
                },
            }),
        }
    }
    Ok(pools)
}

/// What a dispatch key needs besides the request itself.
pub struct KeyContext<'a> {
    pub wf: &'a ValidatedWorkflow,
    pub remaining: &'a RemainingWork,
    pub estimates: &'a ServiceEstimates,
    pub use_selectivity: bool,
}

/// Queue key for a request under the given policy.
pub fn baseline_key(policy: PolicyKind, req: &RequestState, now: f64, ctx: &KeyContext<'_>) -> DispatchKey {
    match policy {
        PolicyKind::Fcfs => DispatchKey::Fcfs { arrival_seq: req.request_id },
        PolicyKind::WorkflowAgnosticPriority => {
            DispatchKey::LeastAttained { attained: OrdF64(req.attained_service()), arrival_seq: req.request_id }
        }
        PolicyKind::StageAware => {
            DispatchKey::Slack(make_priority_key(req, now, ctx.wf, ctx.remaining, ctx.estimates, ctx.use_selectivity))
        }
    }
}

pub const PRESET_NAMES: [&str; 2] = ["nl2sql-isolated", "nl2sql-shared"];

/// Full simulation presets addressable by name.
pub fn named_preset(name: &str) -> Option<SimConfig> {
    let workflow = build_nl2sql(&Nl2SqlParams::default()).expect("default nl2sql params are valid");
    let topology = match name {
        "nl2sql-isolated" => TopologyPreset::isolated([(GENERATOR, 1), (FIXER, 1)]),
        "nl2sql-shared" => TopologyPreset::shared(2),
        _ => return None,
    };
    Some(SimConfig {
        workflow,
        topology,
        policy: PolicyConfig::default(),
        arrivals: ArrivalConfig { rate: 1.0 },
        duration: 300.0,
        warmup: 30.0,
        seed: 1,
        sample_interval: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{validate_workflow, Position};

    fn wf(params: &Nl2SqlParams) -> ValidatedWorkflow {
        validate_workflow(build_nl2sql(params).unwrap()).unwrap()
    }

    #[test]
    fn default_nl2sql_has_three_stages_and_one_loop() {
        let w = wf(&Nl2SqlParams::default());
        assert_eq!(w.stages().len(), 3);
        let loops = w.stages().iter().flat_map(|s| &s.outcomes).filter(|o| o.retry).count();
        assert_eq!(loops, 2, "both failure edges enter the single fixer loop");
        assert_eq!(w.entry(), w.stage_id(GENERATOR).unwrap());
    }

    #[test]
    fn split_must_match_p_fail() {
        let p = Nl2SqlParams { p_syntax_err: 0.1, ..Default::default() };
        assert!(matches!(build_nl2sql(&p), Err(WorkloadError::FailSplit { .. })));
        let p = Nl2SqlParams::default().with_p_fail(1.5);
        assert!(matches!(build_nl2sql(&p), Err(WorkloadError::FailProbability(_))));
    }

    #[test]
    fn zero_budget_full_failure_fails_after_one_attempt() {
        let w = wf(&Nl2SqlParams { retry_budget: 0, ..Default::default() }.with_p_fail(1.0));
        let mut s = RequestState::new(0, 0.0, &w);
        s.position = Position::At(w.stage_id(EXECUTOR).unwrap());
        let step = w.next_step(&s, "syntax_err").unwrap();
        assert_eq!(step.transition, crate::workflow::Next::Done(crate::workflow::Terminal::Failure));
    }

    #[test]
    fn topology_layouts() {
        let w = wf(&Nl2SqlParams::default());
        let iso = build_topology(&TopologyPreset::isolated([(GENERATOR, 1), (FIXER, 1)]), &w).unwrap();
        let llm = iso.iter().filter(|p| matches!(p.kind, PoolKindLayout::Llm { .. })).count();
        assert_eq!((llm, iso.len() - llm), (2, 1));

        let shared = build_topology(&TopologyPreset::shared(2), &w).unwrap();
        assert_eq!(shared.len(), 2);
        assert_eq!(shared[0].stages.len(), 2);
        assert!(matches!(shared[0].kind, PoolKindLayout::Llm { engines: 2, .. }));
        assert_eq!(shared[1].kind, iso[1].kind, "tool pool identical in both modes");

        let empty = TopologyPreset::isolated([(GENERATOR, 1), (FIXER, 0)]);
        assert_eq!(build_topology(&empty, &w), Err(TopologyError::EmptyPool(FIXER.into())));
        let bogus = TopologyPreset::isolated([(GENERATOR, 1), (FIXER, 1), (EXECUTOR, 1)]);
        assert_eq!(build_topology(&bogus, &w), Err(TopologyError::UnknownStage(EXECUTOR.into())));
    }

    #[test]
    fn baseline_keys() {
        let w = wf(&Nl2SqlParams::default());
        let est = ServiceEstimates::from_vec(vec![1.0, 1.0, 1.0]);
        let remaining = RemainingWork::build(&w, &est).unwrap();
        let ctx = KeyContext { wf: &w, remaining: &remaining, estimates: &est, use_selectivity: false };

        let a = RequestState::new(3, 0.0, &w);
        let b = RequestState::new(7, 0.0, &w);
        assert!(baseline_key(PolicyKind::Fcfs, &a, 1.0, &ctx) < baseline_key(PolicyKind::Fcfs, &b, 1.0, &ctx));

        let with_service = |id: u64, served: f64| {
            let mut r = RequestState::new(id, 0.0, &w);
            r.history.push(crate::workflow::StageRecord {
                stage: StageId(0),
                start: 0.0,
                end: served,
                outcome: "done".into(),
            });
            r
        };
        let las = PolicyKind::WorkflowAgnosticPriority;
        assert!(
            baseline_key(las, &with_service(9, 0.2), 2.0, &ctx) < baseline_key(las, &with_service(1, 1.5), 2.0, &ctx)
        );
        assert!(
            baseline_key(las, &with_service(1, 0.5), 2.0, &ctx) < baseline_key(las, &with_service(2, 0.5), 2.0, &ctx)
        );
    }

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            let cfg = named_preset(name).unwrap();
            assert_eq!(cfg.topology.total_llm_engines(), 2);
        }
        assert!(named_preset("nope").is_none());
    }
}
