//! Byzantine-resilient distributed SGD with random committees and
//! holdout-based gradient voting.

pub mod adversary;
pub mod aggregation;
pub mod committee;
pub mod decentralized;
pub mod learnkit;
pub mod orchestrator;
pub mod params;
pub mod rng;

/// Index of a node in the population, `0..n`.
pub type NodeId = usize;

pub use params::ParamVector;
