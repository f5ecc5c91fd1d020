//! Forward-pass parameter selection for budgeted sparse fine-tuning.
//!
//! The crate ranks the parameters of a small neural network by the product of
//! weight magnitude and input-activation statistics gathered in a single
//! forward pass, selects a fixed-size subset under an explicit update budget,
//! fine-tunes only that subset, and compares the result against a
//! gradient-magnitude selector and naive baselines on accuracy, peak logical
//! memory, and selection latency.
//!
//! Layering, bottom up:
//! - [`meter`], [`tensor`], [`tape`]: metered f64 tensors with opt-in
//!   reverse-mode differentiation.
//! - [`model`]: MLP and single-block transformer builders with stable
//!   per-parameter addressing and activation taps.
//! - [`stats`]: streaming per-input-neuron activation moments.
//! - [`select`]: importance scoring (forward-only and gradient-based),
//!   budgeted mask construction, and baselines.
//! - [`train`]: masked SGD fine-tuning and evaluation.
//! - [`data`]: dataset ingestion (synthetic, IDX, CSV) and splits.
//! - [`report`], [`harness`]: strategy comparison runs and their reports.

pub mod data;
pub mod error;
pub mod harness;
pub mod meter;
pub mod model;
pub mod report;
pub mod select;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Arch, Model, ParameterAddress};
pub use tensor::Tensor;
