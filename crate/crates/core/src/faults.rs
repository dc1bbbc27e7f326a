//! Deliberate defects used to show that the verification suite catches them.
//!
//! Faults are thread-local so a mutated run never leaks into concurrent work.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the target term `f_1` of projective aggregation.
    AggregationSignFlip,
    /// Normalizes vector-attention weights over channels instead of neighbors.
    VectorAttentionWrongAxis,
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

pub(crate) fn active(f: Fault) -> bool {
    ACTIVE.with(|a| a.get() == Some(f))
}

/// Runs `body` with `fault` injected on the current thread.
pub fn with_fault<T>(fault: Fault, body: impl FnOnce() -> T) -> T {
    struct Reset(Option<Fault>);
    impl Drop for Reset {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }
    let _reset = Reset(ACTIVE.with(|a| a.replace(Some(fault))));
    body()
}
