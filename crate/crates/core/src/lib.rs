//! Multi-task loss weighting by linear scalarization, with weights chosen
//! from per-iteration training metrics.

pub mod bench;
pub mod commands;
pub mod config;
pub mod costs;
pub mod domain;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod scheduler;
pub mod solver;
pub mod trace;
