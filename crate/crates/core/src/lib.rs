//! Desk-scale laboratory for neural-network model editing and robustness
//! evaluation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensorcore`]: dense tensors, reverse-mode gradients, SGD with momentum.
//! - [`network`]: feed-forward models with prefix/suffix composition and checkpoints.
//! - [`editors`]: output-collision fine-tuning, rewriting, direct low-rank
//!   editing, supervised fine-tuning, weight-space interpolation.
//! - [`shiftlab`]: procedural datasets, region-swap edit tasks, corruptions.
//! - [`metrics`]: OOD penalties and robustness curves.
//! - [`harness`]: config-driven experiments and report emission.

pub mod editors;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod seeds;
pub mod shiftlab;
pub mod tensorcore;

pub use error::{Error, Result};
