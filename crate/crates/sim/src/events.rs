use std::collections::BTreeMap;

use infershare_core::time::Nanos;

/// Min-ordered event set keyed by `(time, sequence)`; equal times pop in
/// insertion order. Popping advances a clock that never goes backward.
#[derive(Debug)]
pub struct EventQueue<E> {
    events: BTreeMap<(Nanos, u64), E>,
    seq: u64,
    now: Nanos,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            events: BTreeMap::new(),
            seq: 0,
            now: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// # Panics
    /// If `at` is in the past.
    pub fn push(&mut self, at: Nanos, event: E) {
        assert!(at >= self.now, "event scheduled at {at} before now {}", self.now);
        self.seq += 1;
        self.events.insert((at, self.seq), event);
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.events.keys().next().map(|k| k.0)
    }

    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        let ((t, _), e) = self.events.pop_first()?;
        self.now = t;
        Some((t, e))
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}
