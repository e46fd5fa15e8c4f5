//! Visible-watermark removal toolkit.
//!
//! A two-stage restoration network predicts, from a watermarked image
//! alone, both the clean background and the watermark mask. The coarse
//! stage is a shared-encoder U-Net whose decoder splits into a
//! mask-prediction branch and a background branch that exchange
//! information; the refinement stage re-encodes the coarse estimate at
//! several scales and fuses them into the final image.
//!
//! Modules:
//! * [`synth`]: watermark compositing and dataset generation
//! * [`blocks`]: reusable network building blocks
//! * [`network`]: full model assembly and checkpoints
//! * [`objectives`]: training losses
//! * [`evaluation`]: image- and mask-quality metrics
//! * [`train`]: optimizer and training loop
//! * [`cli`]: command-line entry points

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod image_data;
pub mod network;
pub mod objectives;
pub mod blocks;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
