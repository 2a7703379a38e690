//! Optimal-stopping formulation of intrusion prevention.
//!
//! A defender watches per-step counts of IDS alerts and login attempts and
//! decides, once per step, whether to keep the gateway open (`Continue`) or
//! block it (`Stop`). The crate provides:
//!
//! - [`model`]: the two-state POMDP (transition kernel, observation function,
//!   rewards) and the exact belief filter;
//! - [`solver`]: alpha-vector value iteration and threshold extraction;
//! - [`dists`]: empirical and synthetic observation models;
//! - [`sim`]: a seeded episode simulator and evaluation metrics;
//! - [`policies`]: threshold, baseline, oracle and neural defender policies;
//! - [`learner`]: actor-critic PPO with GAE, written against plain `Vec<f64>`.

pub mod dists;
pub mod learner;
pub mod model;
pub mod policies;
pub mod rng;
pub mod sim;
pub mod solver;

pub use model::{
    Action, BeliefState, Bounds, Counts, IntrusionState, Observation, ObservationModel,
    RewardParams, TransitionModel,
};
pub use policies::{HistorySummary, Policy, PolicyKind};
pub use sim::{EndReason, EnvConfig, EpisodeTrace, Metrics};
pub use solver::{BeliefMdp, SolverConfig, ThresholdAnalysis, ValueFunction};
