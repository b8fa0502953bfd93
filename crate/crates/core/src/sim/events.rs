use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimEvent {
    /// Trace record `index` arrives.
    Arrival { index: usize },
    /// The prefill batch in flight completes.
    PrefillDone,
    /// The decode step in flight completes.
    StepDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    time_ns: u64,
    seq: u64,
    event: SimEvent,
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time_ns, other.seq).cmp(&(self.time_ns, self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Time-ordered event queue; events at equal times pop in insertion order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Entry>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_ns: u64, event: SimEvent) {
        self.heap.push(Entry {
            time_ns,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, SimEvent)> {
        self.heap.pop().map(|e| (e.time_ns, e.event))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|e| e.time_ns)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_fifo() {
        let mut q = EventQueue::new();
        q.push(5, SimEvent::StepDone);
        q.push(1, SimEvent::Arrival { index: 0 });
        q.push(5, SimEvent::Arrival { index: 1 });
        q.push(1, SimEvent::Arrival { index: 2 });
        let got: Vec<_> = std::iter::from_fn(|| q.pop()).collect();
        assert_eq!(
            got,
            vec![
                (1, SimEvent::Arrival { index: 0 }),
                (1, SimEvent::Arrival { index: 2 }),
                (5, SimEvent::StepDone),
                (5, SimEvent::Arrival { index: 1 }),
            ]
        );
    }
}
