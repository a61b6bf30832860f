//! Event queue with a total, deterministic order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

/// Event kinds in tie-break priority order: at equal times, earlier variants run first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEventKind {
    UpdateEnd,
    WeightsSync,
    Interrupt,
    UpdateBegin,
    RolloutPartial,
    DecodeStep,
    RolloutComplete,
}

impl SimEventKind {
    pub fn priority(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scheduled {
    pub time: f64,
    pub kind: SimEventKind,
    pub seq: u64,
    pub worker: Option<usize>,
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: SimEventKind, worker: Option<usize>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, kind, seq, worker });
    }

    pub fn pop(&mut self) -> Option<Scheduled> {
        self.heap.pop()
    }
}

/// One recorded event of a traced run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<u64>,
    /// Trainer version when the event fired.
    pub version: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_time_then_kind_then_seq() {
        let mut q = EventQueue::default();
        q.push(2.0, SimEventKind::UpdateEnd, None);
        q.push(1.0, SimEventKind::DecodeStep, Some(1));
        q.push(1.0, SimEventKind::DecodeStep, Some(0));
        q.push(1.0, SimEventKind::UpdateBegin, None);
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.kind, e.worker)).collect();
        assert_eq!(
            order,
            vec![
                (SimEventKind::UpdateBegin, None),
                (SimEventKind::DecodeStep, Some(1)),
                (SimEventKind::DecodeStep, Some(0)),
                (SimEventKind::UpdateEnd, None),
            ]
        );
    }
}
