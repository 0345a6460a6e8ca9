//! Value-aligned contrastive pretraining on offline goal-reaching trajectories.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`trajectory`] splits raw episodes at reward events into goal-based
//!    sub-trajectories and labels every frame with its discounted return.
//! 2. [`samplers`] draws contrastive index triples: value-matched pairs across
//!    two games (VEP) and the TCN, SOM and VIP baselines.
//! 3. [`encoder`], [`loss`], [`optim`] and [`train`] train a small
//!    multilayer encoder with exact gradients.
//! 4. [`eval`] measures how well the frozen embedding aligns states of equal
//!    value across games.
//!
//! [`synthworld`] generates families of related synthetic games with known
//! ground-truth values, and [`cli`] ties it all together behind the `valign`
//! binary.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod rng;
pub mod samplers;
pub mod synthworld;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::Tensor;
