//! Experiment orchestration (placeholder while the core modules build).
