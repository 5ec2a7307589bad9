//! Trace records and their CSV encodings.
//!
//! Every float is printed with nine decimals and rows are emitted in event
//! order, so identical runs produce identical bytes.

use std::fmt::Write;

use crate::scheduler::{DispatchKey, OrdF64, PolicyKind, PriorityKey};

pub(crate) fn f9(x: f64) -> String {
    // an empty float sum is -0.0
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.9}")
}

fn opt_f9(x: Option<f64>) -> String {
    x.map(f9).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvSample {
    pub time: f64,
    pub pool: String,
    pub engine: usize,
    pub kv_used_tokens: u64,
    pub resident_prefix_tokens: u64,
    pub kv_capacity_tokens: u64,
    /// Pool the engine is draining, which differs from `pool` while lent.
    pub serving_pool: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueSample {
    pub time: f64,
    pub pool: String,
    pub queue_len: usize,
    pub engines: usize,
}

/// Everything any policy's key can be built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyFields {
    pub slack: f64,
    pub expected_service: f64,
    pub selectivity: Option<f64>,
    pub arrival_seq: u64,
    pub attained: f64,
}

impl KeyFields {
    pub fn key(&self, policy: PolicyKind) -> DispatchKey {
        match policy {
            PolicyKind::Fcfs => DispatchKey::Fcfs { arrival_seq: self.arrival_seq },
            PolicyKind::WorkflowAgnosticPriority => {
                DispatchKey::LeastAttained { attained: OrdF64(self.attained), arrival_seq: self.arrival_seq }
            }
            PolicyKind::StageAware => DispatchKey::Slack(PriorityKey {
                slack: self.slack,
                expected_stage_service: self.expected_service,
                selectivity: self.selectivity,
                arrival_seq: self.arrival_seq,
            }),
        }
    }

    /// The same fields as they read back from a CSV row.
    pub fn rounded(&self) -> Self {
        let r = |x: f64| f9(x).parse::<f64>().unwrap_or(x);
        Self {
            slack: r(self.slack),
            expected_service: r(self.expected_service),
            selectivity: self.selectivity.map(r),
            arrival_seq: self.arrival_seq,
            attained: r(self.attained),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub time: f64,
    pub pool: String,
    pub request: u64,
    pub stage: String,
    pub policy: PolicyKind,
    pub fields: KeyFields,
    /// `None` for tool pools.
    pub engine: Option<usize>,
    pub queue_delay: f64,
    /// Calls left in the queue after this dispatch.
    pub queue_len: usize,
    /// Request and key of the best call left behind.
    pub runner_up: Option<(u64, KeyFields)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOutcome {
    Success,
    Failure,
    Rejected,
}

impl RequestOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestOutcome::Success => "success",
            RequestOutcome::Failure => "failure",
            RequestOutcome::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub request: u64,
    pub arrival: f64,
    pub done: f64,
    pub outcome: RequestOutcome,
    pub latency: f64,
    pub violated_slo: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    pub kv_usage: Vec<KvSample>,
    pub queues: Vec<QueueSample>,
    pub dispatch: Vec<DispatchRecord>,
    pub requests: Vec<RequestRecord>,
}

pub const KV_USAGE_HEADER: &str =
    "time,pool,engine,kv_used_tokens,resident_prefix_tokens,kv_capacity_tokens,serving_pool";
pub const QUEUE_HEADER: &str = "time,pool,queue_len,engines";
pub const DISPATCH_HEADER: &str = "time,pool,request,slack,expected_service,engine,stage,policy,selectivity,arrival_seq,attained,queue_delay,queue_len,next_request,next_slack,next_expected_service,next_selectivity,next_arrival_seq,next_attained";
pub const REQUESTS_HEADER: &str = "request,arrival,done,outcome,latency,violated_slo";

impl Traces {
    pub fn kv_usage_csv(&self) -> String {
        let mut out = String::from(KV_USAGE_HEADER);
        out.push('\n');
        for s in &self.kv_usage {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                f9(s.time),
                s.pool,
                s.engine,
                s.kv_used_tokens,
                s.resident_prefix_tokens,
                s.kv_capacity_tokens,
                s.serving_pool
            );
        }
        out
    }

    pub fn queue_csv(&self) -> String {
        let mut out = String::from(QUEUE_HEADER);
        out.push('\n');
        for s in &self.queues {
            let _ = writeln!(out, "{},{},{},{}", f9(s.time), s.pool, s.queue_len, s.engines);
        }
        out
    }

    pub fn dispatch_csv(&self) -> String {
        let mut out = String::from(DISPATCH_HEADER);
        out.push('\n');
        for d in &self.dispatch {
            let k = &d.fields;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                f9(d.time),
                d.pool,
                d.request,
                f9(k.slack),
                f9(k.expected_service),
                d.engine.map(|e| e.to_string()).unwrap_or_default(),
                d.stage,
                d.policy.as_str(),
                opt_f9(k.selectivity),
                k.arrival_seq,
                f9(k.attained),
                f9(d.queue_delay),
                d.queue_len
            );
            match &d.runner_up {
                Some((req, n)) => {
                    let _ = writeln!(
                        out,
                        ",{},{},{},{},{},{}",
                        req,
                        f9(n.slack),
                        f9(n.expected_service),
                        opt_f9(n.selectivity),
                        n.arrival_seq,
                        f9(n.attained)
                    );
                }
                None => out.push_str(",,,,,,\n"),
            }
        }
        out
    }

    pub fn requests_csv(&self) -> String {
        let mut out = String::from(REQUESTS_HEADER);
        out.push('\n');
        for r in &self.requests {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.request,
                f9(r.arrival),
                f9(r.done),
                r.outcome.as_str(),
                f9(r.latency),
                r.violated_slo
            );
        }
        out
    }
}
