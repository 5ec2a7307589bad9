//! Replays a dispatch trace and checks every dispatch against the call it
//! left behind.
//!
//! Each row carries the dispatched call's key fields and those of the best
//! remaining call in the same queue. A row is a violation when the remaining
//! call strictly precedes the dispatched one under the row's policy. Floats
//! read back from the trace are compared with a tolerance of a few units in
//! the ninth decimal.

use std::cmp::Ordering;

use crate::scheduler::PolicyKind;
use crate::sim::trace::{KeyFields, DISPATCH_HEADER};

const TOL: f64 = 2e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AuditError {
    #[error("dispatch trace header mismatch")]
    Header,
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub line: usize,
    pub request: u64,
    pub runner_up: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub dispatches: usize,
    /// Rows that had a runner-up to compare against.
    pub checked: usize,
    pub violations: Vec<Violation>,
}

fn cmp_tol(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= TOL {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

/// Ordering of two keys built from trace fields.
pub fn compare_fields(policy: PolicyKind, a: &KeyFields, b: &KeyFields) -> Ordering {
    match policy {
        PolicyKind::Fcfs => a.arrival_seq.cmp(&b.arrival_seq),
        PolicyKind::WorkflowAgnosticPriority => cmp_tol(a.attained, b.attained).then(a.arrival_seq.cmp(&b.arrival_seq)),
        PolicyKind::StageAware => cmp_tol(a.slack, b.slack)
            .then(cmp_tol(a.expected_service, b.expected_service))
            .then_with(|| match (a.selectivity, b.selectivity) {
                (Some(x), Some(y)) => cmp_tol(y, x),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            })
            .then(a.arrival_seq.cmp(&b.arrival_seq)),
    }
}

fn parse_policy(s: &str) -> Option<PolicyKind> {
    match s {
        "fcfs" => Some(PolicyKind::Fcfs),
        "workflow_agnostic_priority" => Some(PolicyKind::WorkflowAgnosticPriority),
        "stage_aware" => Some(PolicyKind::StageAware),
        _ => None,
    }
}

struct Row<'a> {
    line: usize,
    cols: Vec<&'a str>,
}

impl Row<'_> {
    fn err(&self, reason: impl Into<String>) -> AuditError {
        AuditError::Row { line: self.line, reason: reason.into() }
    }

    fn f64(&self, i: usize) -> Result<f64, AuditError> {
        self.cols[i].parse().map_err(|_| self.err(format!("column {i} is not a number")))
    }

    fn u64(&self, i: usize) -> Result<u64, AuditError> {
        self.cols[i].parse().map_err(|_| self.err(format!("column {i} is not an integer")))
    }

    fn opt_f64(&self, i: usize) -> Result<Option<f64>, AuditError> {
        if self.cols[i].is_empty() {
            Ok(None)
        } else {
            self.f64(i).map(Some)
        }
    }

    /// Key fields starting at the slack/expected_service pair `s`, with the
    /// selectivity/arrival_seq/attained triple at `t`.
    fn fields(&self, s: usize, t: usize) -> Result<KeyFields, AuditError> {
        Ok(KeyFields {
            slack: self.f64(s)?,
            expected_service: self.f64(s + 1)?,
            selectivity: self.opt_f64(t)?,
            arrival_seq: self.u64(t + 1)?,
            attained: self.f64(t + 2)?,
        })
    }
}

/// Checks a dispatch CSV as written by a simulation run.
pub fn replay_dispatch(csv: &str) -> Result<AuditReport, AuditError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DISPATCH_HEADER => {}
        _ => return Err(AuditError::Header),
    }
    let width = DISPATCH_HEADER.split(',').count();
    let mut report = AuditReport::default();
    for (i, text) in lines {
        if text.is_empty() {
            continue;
        }
        let row = Row { line: i + 1, cols: text.split(',').collect() };
        if row.cols.len() != width {
            return Err(row.err(format!("expected {width} columns, found {}", row.cols.len())));
        }
        report.dispatches += 1;
        if row.cols[13].is_empty() {
            continue;
        }
        let policy = parse_policy(row.cols[7]).ok_or_else(|| row.err("unknown policy"))?;
        let chosen = row.fields(3, 8)?;
        // next_slack, next_expected_service at 14; next_selectivity.. at 16
        let next = row.fields(14, 16)?;
        report.checked += 1;
        if compare_fields(policy, &next, &chosen) == Ordering::Less {
            report.violations.push(Violation { line: row.line, request: row.u64(2)?, runner_up: row.u64(13)? });
        }
    }
    Ok(report)
}
