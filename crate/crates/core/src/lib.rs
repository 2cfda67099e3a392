//! Contrastive knowledge distillation for miniature transformer encoders.
//!
//! A teacher encoder is trained from scratch on a synthetic task, then a
//! smaller student is distilled from it with an angular contrastive loss
//! on intermediate layer outputs (pulling toward the teacher's output for
//! the same input, pushing away from its outputs for in-batch negatives),
//! tempered KL and cross-entropy prediction losses, a two-stage loss
//! schedule, and gradient-perturbation training. Everything runs on a
//! float64 reverse-mode autodiff tape whose analytic gradients are
//! verified against central finite differences.
//!
//! The `ckd` binary exposes the pipeline as subcommands: `train-teacher`,
//! `distill`, `eval`, `grad-check`, `compare` and `bench`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
