//! Discrete-event simulation of stage-aware LLM engine pools serving
//! multi-stage agentic workflows.

pub mod audit;
pub mod capacity;
pub mod dist;
pub mod engine;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod workflow;
pub mod workloads;

pub use capacity::{estimate_capacity, CapacityEstimate};
pub use dist::Dist;
pub use engine::{EngineParams, EngineState};
pub use scheduler::{PolicyConfig, PolicyKind};
pub use sim::metrics::MetricsReport;
pub use sim::trace::Traces;
pub use sim::{run, ArrivalConfig, ConfigError, SimConfig, SimError};
pub use workflow::{validate_workflow, ValidatedWorkflow, WorkflowError, WorkflowSpec};
pub use workloads::{build_nl2sql, named_preset, Nl2SqlParams, PoolMode, TopologyPreset};
