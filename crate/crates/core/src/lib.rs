//! Offline distillation of a diffusion trajectory prior into a one-step
//! deterministic driving policy, with a toy closed-loop world for evaluation.
//!
//! Stages: [`dataset`] builds a scored replay buffer from scripted
//! demonstrations, [`diffusion`] fits the behavior prior, [`iql`] trains the
//! critic and an advantage-weighted initial policy, and [`srpo`] extracts the
//! final policy. [`eval`] runs closed-loop episodes and latency benchmarks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod iql;
pub mod nn;
pub mod pdm;
pub mod pipeline;
pub mod rng;
pub mod srpo;
pub mod world;

pub use error::{Error, Result};
