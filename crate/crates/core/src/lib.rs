//! Multi-group advantage estimation for aligning rectified-flow models.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a flat-parameter MLP with reverse-mode gradients and Adam.
//! - [`flow`]: rectified-flow interpolation, noise schedule, SDE/ODE steps and
//!   Gaussian transition densities.
//! - [`rollout`]: branching schedules, tree-structured and sequential rollouts,
//!   compute accounting.
//! - [`advantage`]: group normalisation, temporal (segment) grouping over trees,
//!   and per-reward grouping.
//! - [`grpo`]: ratios, the clipped objective, and the training loop.
//! - [`envs`]: toy Gaussian-mixture data with closed-form rewards.
//! - [`harness`]: configuration, experiments, and metric emission used by the CLI.

pub mod advantage;
pub mod envs;
pub mod error;
pub mod flow;
pub mod grpo;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};
