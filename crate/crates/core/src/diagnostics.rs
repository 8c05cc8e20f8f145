//! Per-thread counters of training work, used to assert that decoding never
//! runs gradient or optimizer code.

use std::cell::Cell;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
    static OPTIMIZER_STEPS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkCounters {
    pub backward_calls: u64,
    pub optimizer_steps: u64,
}

impl WorkCounters {
    pub fn since(self, earlier: WorkCounters) -> WorkCounters {
        WorkCounters {
            backward_calls: self.backward_calls - earlier.backward_calls,
            optimizer_steps: self.optimizer_steps - earlier.optimizer_steps,
        }
    }
}

/// Counters for the calling thread.
pub fn snapshot() -> WorkCounters {
    WorkCounters {
        backward_calls: BACKWARD_CALLS.with(Cell::get),
        optimizer_steps: OPTIMIZER_STEPS.with(Cell::get),
    }
}

pub(crate) fn note_backward() {
    BACKWARD_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_optimizer_step() {
    OPTIMIZER_STEPS.with(|c| c.set(c.get() + 1));
}
