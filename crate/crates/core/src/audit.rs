//! Operation-count audit.
//!
//! Every matrix factorization, inverse, or dense linear solve in this crate
//! goes through [`record_factorization`]. The recursive filter must never
//! trip the counter; the batch oracles and the controller are allowed to.
//! Benchmarks and tests snapshot the counter around filter calls to verify
//! the zero-factorization contract.
//!
//! Counters are per thread: a belief is owned by a single logical stream,
//! so an audit scope observes exactly the work of the code it wraps.

use std::cell::Cell;

thread_local! {
    static FACTORIZATION_EVENTS: Cell<u64> = const { Cell::new(0) };
}

/// Records one factorization/solve event on this thread.
pub fn record_factorization() {
    FACTORIZATION_EVENTS.with(|c| c.set(c.get() + 1));
}

/// Total factorization/solve events recorded on this thread.
pub fn factorization_count() -> u64 {
    FACTORIZATION_EVENTS.with(|c| c.get())
}

/// Counter snapshot for auditing a region of code.
#[derive(Debug, Clone, Copy)]
pub struct AuditScope {
    start: u64,
}

impl AuditScope {
    pub fn begin() -> Self {
        AuditScope {
            start: factorization_count(),
        }
    }

    /// Factorization events recorded on this thread since
    /// [`AuditScope::begin`].
    pub fn events(&self) -> u64 {
        factorization_count() - self.start
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_counts_only_events_inside_it() {
        record_factorization();
        let scope = AuditScope::begin();
        assert_eq!(scope.events(), 0);
        record_factorization();
        record_factorization();
        assert_eq!(scope.events(), 2);
    }
}
