//! Meta-learning testbed comparing the standard episodic objective with the
//! fixed-support-pool objective.
//!
//! The crate is organised bottom-up:
//!
//! * [`taskspace`]: datasets, support pools, episode samplers, regression task
//!   generators and pool-count combinatorics.
//! * [`solvers`]: embedding networks and the prototype / ridge last-layer heads,
//!   with hand-written reverse-mode gradients.
//! * [`objectives`]: episode losses, gradients and Monte Carlo estimators.
//! * [`oracle`]: closed-form meta-linear-regression machinery (one-step
//!   adaptation, optimal solutions, Hessians, concentration ingredients).
//! * [`trainer`]: episodic SGD with momentum, checkpoints, trajectories.
//! * [`diagnostics`]: multi-pool trajectories, interpolation, generalization
//!   gap, TIC ratio and an empirical stability estimate.
//! * [`report`]: CSV tables and SVG line plots.

// Validation uses `!(x > 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod objectives;
pub mod oracle;
pub mod report;
pub mod seeds;
pub mod solvers;
pub mod taskspace;
pub mod trainer;

pub use error::{Error, Result};
