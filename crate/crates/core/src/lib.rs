//! Balanced allocations under d-thinning.
//!
//! Balls arrive one at a time; each is offered up to `d` uniformly random
//! bins in turn and a strategy may reject all but the last. This crate runs
//! that process exactly ([`state`]), ships the ℓ-threshold strategy and the
//! usual baselines ([`strategy`]), evaluates the analytic predictions and tail
//! bounds ([`theory`]), computes exact max-load laws for tiny instances
//! ([`oracle`]) and drives reproducible parallel experiments ([`experiment`]).

pub mod error;
pub mod experiment;
pub mod oracle;
pub mod pool;
pub mod state;
pub mod strategy;
pub mod theory;

pub use error::{Error, Result};
pub use state::{run_trial, run_trial_traced, AllocationState, BinIndex, BinSet, DecisionRecord, Trace, TrialResult};
pub use strategy::{Decision, Strategy, StrategySpec};
