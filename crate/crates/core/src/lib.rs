//! Self-auxiliary asymmetric multi-task learning.
//!
//! Self-auxiliary tasks clone a *source* task's data, labels and loss but
//! route it through a *target* task's encoder with an independent decoder,
//! so the target task's private encoder layers learn from the source task
//! while the source task's private layers never see the target's signal.
//! Coefficients select or weigh those clones: by pairwise enumeration, by a
//! finite-difference hypergradient, or by the product of both.
//!
//! Modules:
//! - [`diffcore`]: tensors, reverse-mode autodiff, optimisers.
//! - [`model`]: partitioned multi-task networks with primary and self-auxiliary routes.
//! - [`strategies`]: coefficient machinery plus a registry of training strategies.
//! - [`trainer`]: training loops, checkpoint selection, batch timing.
//! - [`relationships`]: enumeration oracle and relationship estimators.
//! - [`datasets`]: synthetic generators and CSV ingestion.
//! - [`metrics`]: task metrics and relative improvement.

// `!(x > 0.0)` is used on purpose so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod model;
pub mod relationships;
pub mod rng;
pub mod strategies;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
