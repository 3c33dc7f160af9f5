//! Slow reference implementations the test suites hold the library against.
//!
//! Everything here recomputes results straight from the definitions:
//! matching is re-derived per threshold, precision envelopes come from
//! per-rank scans instead of a running maximum, and the bank model keeps
//! plain vectors. None of it shares logic with the fast paths in
//! `openset-core`; only the data types are common.

pub mod bank;
pub mod metrics;
