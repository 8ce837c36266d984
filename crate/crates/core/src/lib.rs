//! Test-time reinforcement learning from self-consistency rewards.
//!
//! A policy samples `N` answers per unlabeled prompt; each answer is rewarded
//! with its empirical frequency in the group minus `alpha` times the group's
//! answer entropy. Rewards are standardized into group-relative advantages that
//! drive a policy-gradient update.

pub mod canon;
pub mod collect;
pub mod engine;
pub mod error;
pub mod grpo;
pub mod io;
pub mod label;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
