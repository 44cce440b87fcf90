//! Evolving subnetwork training (EST) for small decoder-only transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense row-major tensors and a tape-based
//!   reverse-mode differentiator.
//! - [`model`]: a GPT-style decoder whose attention heads, MLP columns and
//!   layers can be sampled per step through a [`model::SubnetworkMask`].
//! - [`sampler`] and [`scheduler`]: random index sets per step and the staged
//!   rate schedule that grows the subnetwork over training.
//! - [`cost`]: FLOPs accounting for a schedule and for individual masks.
//! - [`harness`]: corpus handling, AdamW, learning-rate schedules, the
//!   training loop and checkpoints.
//! - [`diagnostics`]: Hutchinson trace estimation and loss-curve analytics.

pub mod autodiff;
pub mod cost;
pub mod diagnostics;
mod error;
pub mod harness;
pub mod model;
pub mod sampler;
pub mod scheduler;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, SubnetworkMask};
pub use scheduler::{Rates, SamplingScheduler};
pub use tensor::{Scalar, Tensor};

/// Engine-wide training precision. Build with `--features f64` to train in
/// double precision.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
