//! Adapter-ensemble test-time training for verifiable discovery tasks.
//!
//! A frozen base policy carries `K` low-rank adapters. Rollout groups are
//! scored by every adapter, ensemble disagreement shapes leave-one-out
//! advantages, and a nuclear-norm penalty on the stacked adapter
//! projections keeps the members apart.

pub mod advantage;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod oracles;
pub mod policy;
pub mod propcheck;
pub mod regularizer;
pub mod seed;
pub mod trainer;
pub mod uncertainty;

pub use advantage::{group_advantages, solve_beta, BetaSolution, GroupAdvantages, ShapingParams};
pub use envs::{environment_by_name, AutocorrEnv, Environment, FamilyRules, MotifEnv};
pub use error::{Error, Result};
pub use linalg::{Distribution, Matrix};
pub use metrics::{EnsembleRecord, EpochSummary, RolloutRecord, RunLog};
pub use policy::{
    init_ensemble, AdapterEnsemble, AdapterInit, AdapterParams, Limits, PolicyArchitecture,
    Rollout, Token,
};
pub use trainer::{
    run_training, ParentStrategy, RunMode, RunOptions, TrainerConfig, TrainingOutcome,
};
pub use uncertainty::{GateConfig, GateDecision, StreamingGate, StreamingGateState};
