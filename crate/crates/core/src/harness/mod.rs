//! Metrics, oracles, and experiment orchestration.
