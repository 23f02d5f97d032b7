//! Empirical-NTK laboratory for KL-regularized RL post-training of a small
//! autoregressive softmax language model.
//!
//! The crate covers the full loop: a synthetic task with a bounded reward
//! ([`corpus`]), the policy and its feature map ([`model`]), exact gradients
//! with finite-difference oracles ([`grad`]), the empirical NTK with its
//! Representation/Gradient split ([`ntk`]), SFT and RL training including the
//! classifier-first schedule ([`trainer`]), and the measurement suite
//! ([`analyzer`]). [`verify`] bundles the oracle checks into one report.

pub mod analyzer;
pub mod corpus;
pub mod error;
pub mod format;
pub mod grad;
pub mod model;
pub mod ntk;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
