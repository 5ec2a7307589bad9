//! Agentic workflows as validated call graphs.
//!
//! A workflow is a set of stages (LLM calls or tool calls). Each stage ends
//! with one of several labelled outcomes, drawn with fixed probabilities, and
//! every outcome names the next stage or a terminal. Outcomes flagged `retry`
//! re-enter a loop and consume one unit of the retry budget; once the budget
//! is spent such an outcome ends the request in failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{Dist, DistError};
use crate::rng::Stream;

const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageId(pub usize);

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Llm,
    Tool,
}

/// Where an outcome leads. Serialized as a stage name, or the reserved
/// strings `success` / `failure`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Target {
    Stage(String),
    Success,
    Failure,
}

impl From<String> for Target {
    fn from(s: String) -> Self {
        match s.as_str() {
            "success" => Target::Success,
            "failure" => Target::Failure,
            _ => Target::Stage(s),
        }
    }
}

impl From<Target> for String {
    fn from(t: Target) -> Self {
        match t {
            Target::Stage(s) => s,
            Target::Success => "success".into(),
            Target::Failure => "failure".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    pub label: String,
    pub probability: f64,
    pub next: Target,
    /// Taking this edge re-enters the retry loop and spends budget.
    #[serde(default)]
    pub retry: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub id: String,
    pub kind: StageKind,
    /// Stage-specific prompt/exemplar prefix shared by every call of the stage.
    #[serde(default)]
    pub prefix_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Dist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<Dist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_time: Option<Dist>,
    pub outcomes: Vec<OutcomeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub entry_stage: String,
    pub retry_budget: u32,
    pub slo_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkflowError {
    #[error("EmptyWorkflow: workflow `{0}` has no stages")]
    Empty(String),
    #[error("DuplicateStage: stage id `{0}` appears more than once")]
    DuplicateStage(String),
    #[error("ReservedStageId: `{0}` is reserved for terminals")]
    ReservedStageId(String),
    #[error("InvalidStageId: `{0}` must be non-empty and use only letters, digits, `_`, `-` or `.`")]
    InvalidStageId(String),
    #[error("StageKindMismatch: stage `{stage}`: {detail}")]
    StageKindMismatch { stage: String, detail: &'static str },
    #[error("InvalidDistribution: stage `{stage}` field `{field}`: {source}")]
    InvalidDistribution { stage: String, field: &'static str, source: DistError },
    #[error("InvalidProbability: stage `{stage}` outcome `{label}` has probability {probability}")]
    InvalidProbability { stage: String, label: String, probability: f64 },
    #[error("DuplicateOutcome: stage `{stage}` lists outcome `{label}` twice")]
    DuplicateOutcome { stage: String, label: String },
    #[error("ProbabilityMassError: outcome probabilities of stage `{stage}` sum to {total}, expected 1")]
    ProbabilityMass { stage: String, total: f64 },
    #[error("DanglingTransition: stage `{stage}` outcome `{label}` targets unknown stage `{target}`")]
    DanglingTransition { stage: String, label: String, target: String },
    #[error("UnknownEntry: entry stage `{0}` does not exist")]
    UnknownEntry(String),
    #[error("UnreachableStage: stage `{0}` cannot be reached from the entry stage")]
    UnreachableStage(String),
    #[error("UnreachableTerminal: no outcome path from the entry stage reaches success")]
    UnreachableTerminal,
    #[error("UnboundedCycle: cycle through {0:?} has no retry-budgeted edge")]
    UnboundedCycle(Vec<String>),
    #[error("InvalidSlo: slo_seconds must be positive and finite, got {0}")]
    InvalidSlo(f64),
    #[error("UnknownOutcome: stage `{stage}` has no outcome `{label}`")]
    UnknownOutcome { stage: String, label: String },
    #[error("TerminalState: request {0} already finished")]
    TerminalState(u64),
    #[error("MissingEstimate: no service estimate for stage `{0}`")]
    MissingEstimate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Stage(StageId),
    Done(Terminal),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub label: String,
    pub probability: f64,
    pub next: Next,
    pub retry: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageWork {
    Llm { prefix_tokens: u64, prompt_tokens: Dist, output_tokens: Dist },
    Tool { service_time: Dist },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub id: String,
    pub work: StageWork,
    pub outcomes: Vec<Outcome>,
}

impl Stage {
    pub fn is_llm(&self) -> bool {
        matches!(self.work, StageWork::Llm { .. })
    }

    pub fn prefix_tokens(&self) -> u64 {
        match self.work {
            StageWork::Llm { prefix_tokens, .. } => prefix_tokens,
            StageWork::Tool { .. } => 0,
        }
    }

    /// Draws an outcome by inverse CDF over the listed order.
    pub fn sample_outcome(&self, rng: &mut Stream) -> &Outcome {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for o in &self.outcomes {
            acc += o.probability;
            if u < acc {
                return o;
            }
        }
        // rounding slack in the cumulative sum: fall back to the last outcome
        // with positive mass
        self.outcomes.iter().rev().find(|o| o.probability > 0.0).unwrap_or(&self.outcomes[self.outcomes.len() - 1])
    }
}

/// A workflow that passed every structural check. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedWorkflow {
    spec: WorkflowSpec,
    stages: Vec<Stage>,
    index: BTreeMap<String, StageId>,
    entry: StageId,
}

impl ValidatedWorkflow {
    pub fn spec(&self) -> &WorkflowSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage(&self, id: StageId) -> &Stage {
        &self.stages[id.0]
    }

    pub fn stage_id(&self, name: &str) -> Option<StageId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self) -> StageId {
        self.entry
    }

    pub fn retry_budget(&self) -> u32 {
        self.spec.retry_budget
    }

    pub fn slo_seconds(&self) -> f64 {
        self.spec.slo_seconds
    }

    pub fn stage_ids(&self) -> impl Iterator<Item = StageId> {
        (0..self.stages.len()).map(StageId)
    }

    /// Resolves the transition for `outcome` at the request's current stage.
    /// A retry edge taken with the budget already spent ends in failure.
    pub fn next_step(&self, state: &RequestState, outcome: &str) -> Result<NextStep, WorkflowError> {
        let stage_id = match state.position {
            Position::At(s) => s,
            Position::Done(_) => return Err(WorkflowError::TerminalState(state.request_id)),
        };
        let stage = self.stage(stage_id);
        let o = stage
            .outcomes
            .iter()
            .find(|o| o.label == outcome)
            .ok_or_else(|| WorkflowError::UnknownOutcome { stage: stage.id.clone(), label: outcome.to_string() })?;
        Ok(self.resolve(o, state.retries_used))
    }

    fn resolve(&self, o: &Outcome, retries_used: u32) -> NextStep {
        if o.retry {
            if retries_used >= self.spec.retry_budget {
                return NextStep { transition: Next::Done(Terminal::Failure), retries_used };
            }
            if let Next::Stage(_) = o.next {
                return NextStep { transition: o.next, retries_used: retries_used + 1 };
            }
        }
        NextStep { transition: o.next, retries_used }
    }

    /// Probability that the stage's outcome ends the workflow, given how much
    /// budget the request has already spent.
    pub fn selectivity(&self, stage: StageId, retries_used: u32) -> f64 {
        self.stage(stage)
            .outcomes
            .iter()
            .filter(|o| matches!(self.resolve(o, retries_used).transition, Next::Done(_)))
            .map(|o| o.probability)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NextStep {
    pub transition: Next,
    pub retries_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    At(StageId),
    Done(Terminal),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: StageId,
    pub start: f64,
    pub end: f64,
    pub outcome: String,
}

/// A request's position in its workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestState {
    pub request_id: u64,
    pub arrival_time: f64,
    pub deadline: f64,
    pub position: Position,
    pub retries_used: u32,
    pub history: Vec<StageRecord>,
}

impl RequestState {
    pub fn new(request_id: u64, arrival_time: f64, wf: &ValidatedWorkflow) -> Self {
        Self {
            request_id,
            arrival_time,
            deadline: arrival_time + wf.slo_seconds(),
            position: Position::At(wf.entry()),
            retries_used: 0,
            history: Vec::new(),
        }
    }

    pub fn current_stage(&self) -> Option<StageId> {
        match self.position {
            Position::At(s) => Some(s),
            Position::Done(_) => None,
        }
    }

    pub fn apply(&mut self, step: NextStep) {
        self.retries_used = step.retries_used;
        self.position = match step.transition {
            Next::Stage(s) => Position::At(s),
            Next::Done(t) => Position::Done(t),
        };
    }

    /// How many times the request has already run `stage`.
    pub fn visits(&self, stage: StageId) -> u64 {
        self.history.iter().filter(|r| r.stage == stage).count() as u64
    }

    /// Total service time received so far, excluding queueing.
    pub fn attained_service(&self) -> f64 {
        self.history.iter().map(|r| r.end - r.start).sum()
    }
}

pub fn validate_workflow(spec: WorkflowSpec) -> Result<ValidatedWorkflow, WorkflowError> {
    if spec.stages.is_empty() {
        return Err(WorkflowError::Empty(spec.name.clone()));
    }
    if !(spec.slo_seconds.is_finite() && spec.slo_seconds > 0.0) {
        return Err(WorkflowError::InvalidSlo(spec.slo_seconds));
    }

    let mut index = BTreeMap::new();
    for (i, s) in spec.stages.iter().enumerate() {
        if s.id == "success" || s.id == "failure" {
            return Err(WorkflowError::ReservedStageId(s.id.clone()));
        }
        if s.id.is_empty() || !s.id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) {
            return Err(WorkflowError::InvalidStageId(s.id.clone()));
        }
        if index.insert(s.id.clone(), StageId(i)).is_some() {
            return Err(WorkflowError::DuplicateStage(s.id.clone()));
        }
    }
    let entry = *index.get(&spec.entry_stage).ok_or_else(|| WorkflowError::UnknownEntry(spec.entry_stage.clone()))?;

    let mut stages = Vec::with_capacity(spec.stages.len());
    for s in &spec.stages {
        stages.push(compile_stage(s, &index)?);
    }

    check_reachability(&stages, entry)?;
    check_bounded_cycles(&stages)?;

    Ok(ValidatedWorkflow { spec, stages, index, entry })
}

fn compile_stage(s: &StageSpec, index: &BTreeMap<String, StageId>) -> Result<Stage, WorkflowError> {
    let mismatch = |detail| WorkflowError::StageKindMismatch { stage: s.id.clone(), detail };
    let check = |field: &'static str, d: &Dist| {
        d.validate().map_err(|source| WorkflowError::InvalidDistribution { stage: s.id.clone(), field, source })
    };
    let work = match s.kind {
        StageKind::Llm => {
            if s.service_time.is_some() {
                return Err(mismatch("llm stage must not set service_time"));
            }
            let prompt = s.prompt_tokens.clone().ok_or_else(|| mismatch("llm stage needs prompt_tokens"))?;
            let output = s.output_tokens.clone().ok_or_else(|| mismatch("llm stage needs output_tokens"))?;
            check("prompt_tokens", &prompt)?;
            check("output_tokens", &output)?;
            StageWork::Llm { prefix_tokens: s.prefix_tokens, prompt_tokens: prompt, output_tokens: output }
        }
        StageKind::Tool => {
            if s.prefix_tokens != 0 || s.prompt_tokens.is_some() || s.output_tokens.is_some() {
                return Err(mismatch("tool stage must not set token fields"));
            }
            let service = s.service_time.clone().ok_or_else(|| mismatch("tool stage needs service_time"))?;
            check("service_time", &service)?;
            StageWork::Tool { service_time: service }
        }
    };

    let mut labels = BTreeSet::new();
    let mut outcomes = Vec::with_capacity(s.outcomes.len());
    let mut total = 0.0;
    for o in &s.outcomes {
        if !(o.probability.is_finite() && (0.0..=1.0).contains(&o.probability)) {
            return Err(WorkflowError::InvalidProbability {
                stage: s.id.clone(),
                label: o.label.clone(),
                probability: o.probability,
            });
        }
        if !labels.insert(o.label.as_str()) {
            return Err(WorkflowError::DuplicateOutcome { stage: s.id.clone(), label: o.label.clone() });
        }
        total += o.probability;
        let next = match &o.next {
            Target::Success => Next::Done(Terminal::Success),
            Target::Failure => Next::Done(Terminal::Failure),
            Target::Stage(name) => Next::Stage(*index.get(name).ok_or_else(|| WorkflowError::DanglingTransition {
                stage: s.id.clone(),
                label: o.label.clone(),
                target: name.clone(),
            })?),
        };
        outcomes.push(Outcome { label: o.label.clone(), probability: o.probability, next, retry: o.retry });
    }
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(WorkflowError::ProbabilityMass { stage: s.id.clone(), total });
    }
    Ok(Stage { id: s.id.clone(), work, outcomes })
}

fn check_reachability(stages: &[Stage], entry: StageId) -> Result<(), WorkflowError> {
    let mut seen = vec![false; stages.len()];
    let mut stack = vec![entry];
    let mut success = false;
    seen[entry.0] = true;
    while let Some(s) = stack.pop() {
        for o in &stages[s.0].outcomes {
            match o.next {
                Next::Stage(t) if !seen[t.0] => {
                    seen[t.0] = true;
                    stack.push(t);
                }
                Next::Done(Terminal::Success) => success = true,
                _ => {}
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(WorkflowError::UnreachableStage(stages[i].id.clone()));
    }
    if !success {
        return Err(WorkflowError::UnreachableTerminal);
    }
    Ok(())
}

/// Every cycle must cross a retry edge, i.e. the graph without retry edges
/// is acyclic.
fn check_bounded_cycles(stages: &[Stage]) -> Result<(), WorkflowError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Closed,
    }
    fn visit(v: usize, stages: &[Stage], marks: &mut [Mark], path: &mut Vec<usize>) -> Result<(), Vec<usize>> {
        marks[v] = Mark::Open;
        path.push(v);
        for o in stages[v].outcomes.iter().filter(|o| !o.retry) {
            if let Next::Stage(t) = o.next {
                match marks[t.0] {
                    Mark::Open => {
                        let start = path.iter().position(|&p| p == t.0).unwrap_or(0);
                        return Err(path[start..].to_vec());
                    }
                    Mark::New => visit(t.0, stages, marks, path)?,
                    Mark::Closed => {}
                }
            }
        }
        path.pop();
        marks[v] = Mark::Closed;
        Ok(())
    }

    let mut marks = vec![Mark::New; stages.len()];
    for v in 0..stages.len() {
        if marks[v] == Mark::New {
            let mut path = Vec::new();
            visit(v, stages, &mut marks, &mut path).map_err(|cycle| {
                WorkflowError::UnboundedCycle(cycle.into_iter().map(|i| stages[i].id.clone()).collect())
            })?;
        }
    }
    Ok(())
}

/// Expected number of fixer invocations when every execution attempt fails
/// independently with probability `p_fail` and at most `budget` fixes run.
pub fn expected_fixer_invocations(p_fail: f64, budget: u32) -> f64 {
    if p_fail >= 1.0 {
        return f64::from(budget);
    }
    if p_fail <= 0.0 {
        return 0.0;
    }
    p_fail * (1.0 - p_fail.powi(budget as i32)) / (1.0 - p_fail)
}

/// Mean service seconds per stage, indexed by `StageId`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceEstimates(Vec<f64>);

impl ServiceEstimates {
    pub fn from_named(wf: &ValidatedWorkflow, named: &BTreeMap<String, f64>) -> Result<Self, WorkflowError> {
        wf.stages()
            .iter()
            .map(|s| named.get(&s.id).copied().ok_or_else(|| WorkflowError::MissingEstimate(s.id.clone())))
            .collect::<Result<Vec<_>, _>>()
            .map(ServiceEstimates)
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ServiceEstimates(values)
    }

    pub fn get(&self, s: StageId) -> f64 {
        self.0[s.0]
    }

    pub fn set(&mut self, s: StageId, v: f64) {
        self.0[s.0] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Expected remaining service for every `(stage, retries_used)` state.
///
/// Built once by memoized recursion over the outcome graph. The recursion is
/// finite because non-retry edges form a DAG and retry edges strictly raise
/// `retries_used` up to the budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainingWork {
    budget: u32,
    // [stage][retries_used]
    table: Vec<Vec<f64>>,
}

impl RemainingWork {
    pub fn build(wf: &ValidatedWorkflow, est: &ServiceEstimates) -> Result<Self, WorkflowError> {
        if est.0.len() != wf.stages().len() {
            let missing = wf.stages().get(est.0.len()).map(|s| s.id.clone()).unwrap_or_default();
            return Err(WorkflowError::MissingEstimate(missing));
        }
        let budget = wf.retry_budget();
        let mut memo: Vec<Vec<Option<f64>>> = vec![vec![None; budget as usize + 1]; wf.stages().len()];
        for s in wf.stage_ids() {
            for r in 0..=budget {
                remaining_from(wf, est, s, r, &mut memo);
            }
        }
        let table = memo.into_iter().map(|row| row.into_iter().map(|v| v.unwrap_or(0.0)).collect()).collect();
        Ok(Self { budget, table })
    }

    pub fn at(&self, stage: StageId, retries_used: u32) -> f64 {
        self.table[stage.0][retries_used.min(self.budget) as usize]
    }

    pub fn for_state(&self, state: &RequestState) -> f64 {
        match state.position {
            Position::At(s) => self.at(s, state.retries_used),
            Position::Done(_) => 0.0,
        }
    }
}

fn remaining_from(
    wf: &ValidatedWorkflow,
    est: &ServiceEstimates,
    s: StageId,
    r: u32,
    memo: &mut Vec<Vec<Option<f64>>>,
) -> f64 {
    if let Some(v) = memo[s.0][r as usize] {
        return v;
    }
    let mut total = est.get(s);
    for o in &wf.stage(s).outcomes {
        let step = wf.resolve(o, r);
        if let Next::Stage(t) = step.transition {
            total += o.probability * remaining_from(wf, est, t, step.retries_used, memo);
        }
    }
    memo[s.0][r as usize] = Some(total);
    total
}

/// Exact expectation of remaining service from `state`.
pub fn expected_remaining_work(
    state: &RequestState,
    wf: &ValidatedWorkflow,
    est: &ServiceEstimates,
) -> Result<f64, WorkflowError> {
    Ok(RemainingWork::build(wf, est)?.for_state(state))
}

/// Expected number of visits to each stage for a fresh request.
pub fn expected_visits(wf: &ValidatedWorkflow) -> Vec<f64> {
    wf.stage_ids()
        .map(|target| {
            let est = ServiceEstimates(wf.stage_ids().map(|s| if s == target { 1.0 } else { 0.0 }).collect());
            RemainingWork::build(wf, &est).map(|t| t.at(wf.entry(), 0)).unwrap_or(0.0)
        })
        .collect()
}
