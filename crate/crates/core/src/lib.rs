//! Deterministic simulator of reputation-aware federated meta-learning.
//!
//! Meta-learners are grouped into coalitions by a hedonic game, each coalition
//! runs a leader/follower incentive game to fix CPU frequencies and rewards,
//! members train a small MLP with a Hessian-corrected meta-gradient, and every
//! contribution is committed to a hash-chained ledger that backs the
//! reputation scores used in the next round.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coalition;
pub mod costmodel;
pub mod datasets;
pub mod error;
pub mod ledger;
pub mod metalearner;
pub mod orchestrator;
pub mod reputation;
pub mod stackelberg;

pub use error::{Error, Result};

/// Index of a meta-learner in the experiment population.
pub type LearnerId = usize;
