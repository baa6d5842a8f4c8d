//! Personalized deterioration risk scoring for hospital ward patients.
//!
//! Physiological streams are modelled by multitask Gaussian-process experts,
//! one stable and one deteriorating expert per latent patient subtype. Subtypes
//! are discovered among stable patients, mapped to admission features, and the
//! resulting mixture scores new patients online.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod config;
pub mod error;
pub mod eval;
pub mod gp;
pub mod model_file;
pub mod online;
pub mod pipeline;
pub mod subtype;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
