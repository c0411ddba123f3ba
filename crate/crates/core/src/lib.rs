//! Deterministic simulation engine for federated continual learning experiments.

pub mod config;
pub mod continual;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod workload;

pub use error::{FclError, Result};
