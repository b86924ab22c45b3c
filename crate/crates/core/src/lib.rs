//! Numerical core of the Q-score matching laboratory.
//!
//! * [`nn`]: MLPs with exact parameter and input gradients, Adam.
//! * [`diffusion`]: the score-driven action sampler and forward VP noising.
//! * [`critic`]: twin Q networks, n-step TD targets, action gradients.
//! * [`trainer`]: replay buffer, actor updates (QSM, policy gradient,
//!   backprop-through-sampler) and the training loop.
//! * [`envs`]: closed-form control tasks and a Monte-Carlo Q estimator.
//! * [`gridworld`]: tabular policy evaluation and Boltzmann policy iteration.
//! * [`sde`]: Euler-Maruyama integration and Langevin stationarity checks.

pub mod critic;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod gridworld;
pub mod nn;
pub mod sde;
pub mod trainer;

pub use error::{Error, Result};

/// Random stream used throughout: seedable and platform independent.
pub type LabRng = rand_chacha::ChaCha8Rng;
