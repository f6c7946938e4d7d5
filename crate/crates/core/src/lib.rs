//! Learned continuous communication between cooperating agents.
//!
//! Agents in a matrix environment must each report how many of the other
//! agents share their hidden label. Solving it takes communication, and the
//! channel here is a learned one: hidden states pass between agents through
//! a differentiable aggregator (mean or scaled dot-product attention), the
//! whole stack trains with REINFORCE plus an entropy bonus, and the autodiff
//! underneath is a small tape built for exactly the ops this model needs.
//!
//! Modules, bottom up:
//! - [`tensor`], [`tape`]: dense f64 matrices and reverse-mode autodiff.
//! - [`optim`]: SGD and Adam.
//! - [`env`]: the matrix environment and its closed-form baselines.
//! - [`model`]: encoder, communication steps, decoder, checkpoints.
//! - [`trainer`]: batched REINFORCE loop and metrics.
//! - [`analysis`]: protocol extraction, separability, parametric curve fit.

pub mod analysis;
pub mod env;
pub mod error;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
