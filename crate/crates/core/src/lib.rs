//! Amortized Bayesian few-shot classification.
//!
//! A shared encoder maps inputs to features, a per-task amortization network
//! turns the support set into a diagonal Gaussian over per-class decoder
//! weights, and queries are classified by a Monte-Carlo averaged predictive.
//! Training adds a β-weighted regularizer (KL or MMD) between the context
//! posterior and a query-conditioned one, with β following a constant,
//! monotonic or cyclical schedule.
//!
//! Everything runs on a small reverse-mode autodiff tape in [`autodiff`].
//! Per-task work in batches and evaluations is spread over a rayon pool when
//! the `parallel` feature is on (the default); see [`exec::Execution`].

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod divergences;
pub mod episodes;
pub mod error;
pub mod exec;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
