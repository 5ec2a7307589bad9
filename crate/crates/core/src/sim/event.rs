//! Timestamped events with a deterministic total order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::engine::{EngineId, PoolId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Arrival,
    PrefillDone { engine: EngineId, request: u64 },
    CallComplete { engine: EngineId, version: u64 },
    ToolComplete { pool: PoolId, request: u64, started_at: f64 },
    AutoscaleTick,
    BorrowCheck,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

// min-heap on (time, seq)
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Eq for Event {}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("event scheduled at {at} before the clock {now}")]
pub struct PastEvent {
    pub at: f64,
    pub now: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<(), PastEvent> {
        if time < self.now || time.is_nan() {
            return Err(PastEvent { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        Ok(())
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    /// Pops the earliest event and moves the clock to it.
    pub fn pop(&mut self) -> Option<Event> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some(e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
