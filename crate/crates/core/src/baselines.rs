//! Comparison solvers.
