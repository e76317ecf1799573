//! Continual-learning engine built around a replay buffer with
//! importance-guided storage and uncertainty-based acquisition.
//!
//! The library trains a dropout MLP over a sequence of tasks while
//! learning a per-instance loss coefficient for every training example.
//! The area under each coefficient's trajectory ranks instances for
//! storage in a replay buffer; Monte Carlo dropout disagreement ranks
//! buffered instances for replay. Transfer metrics, synthetic scenario
//! generators, task-similarity tooling, baseline strategies, and a CLI
//! harness round out the engine.

pub mod buffer;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scenarios;
pub mod taskspace;
pub mod types;
pub mod weighting;

pub use nn::NnError;
pub use types::{InstanceId, TaskId};
