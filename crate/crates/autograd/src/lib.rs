//! Reverse-mode automatic differentiation on `f64` tensors.
//!
//! The engine records every operation on a [`Tape`]; calling
//! [`Tape::backward`] replays the record in reverse and accumulates
//! gradients into each node. Everything is `f64` and single-threaded so
//! that forward values, gradients, and optimizer updates are bit-for-bit
//! reproducible across runs, which the training and checkpoint layers
//! rely on.
//!
//! Tensors use dynamic-rank [`ndarray::ArrayD`] storage with the
//! following shape conventions:
//!
//! * activations `[n, c, h, w]`
//! * channel vectors `[n, c]`
//! * per-sample scalars `[n, 1]`
//! * loss scalars: zero-dimensional

pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod resample;
pub mod tape;

pub use gradcheck::{central_diff_gradients, relative_error};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Alias for the dynamic-rank tensors the engine operates on.
pub type Tensor = ndarray::ArrayD<f64>;
