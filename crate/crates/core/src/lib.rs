//! A three-stage generative model for skeletal motion.
//!
//! Stage 1 embeds each frame into a small latent code and decodes it back
//! through forward kinematics. Stage 2 compresses short latent trajectories
//! into a future summary. Stage 3 is a stochastic recurrent model over
//! current and future states that generates open-ended motion from a short
//! prefix.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod mocap;
pub mod nn;
pub mod pose_ae;
pub mod rng;
pub mod training;
pub mod trajectory;

pub use error::{DfnError, Result};
