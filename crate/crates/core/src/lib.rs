//! Offline reinforcement learning without a reward function.
//!
//! A reward model is fitted to a ranking over trajectories, used to label a
//! reward-free offline dataset, and a TD3+BC agent is trained on the labels.
//! The crate also carries the baselines (behavioral cloning, ground-truth,
//! constant and random rewards) and diagnostics relating the learned
//! critic to discounted returns.

pub mod analysis;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod nn;
pub mod ranking;
pub mod policy;
pub mod reward_model;

pub use error::{Error, RankingError, Result};
