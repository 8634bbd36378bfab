//! # steganoforge
//!
//! Hides arbitrary bytes in RGB images with a trainable convolutional
//! encoder/decoder pair and an adversarial critic. The lossy neural channel is
//! wrapped in a Reed-Solomon code over GF(256) so that messages come back
//! byte-exact, and the crate ships the metrics (bit accuracy, RS-BPP, PSNR,
//! SSIM) and the classical steganalysis suite used to judge the result.
//!
//! Module map:
//!
//! * [`imagery`]: PNG I/O, the `[-1, 1]` tensor mapping, augmentation, dataset layout.
//! * [`payload`]: bit tensors, GF(256) Reed-Solomon, framing and capacity.
//! * [`networks`]: the encoder variants, decoder and critic with hand-written backprop.
//! * [`training`]: losses, Adam, the adversarial step and the epoch loop.
//! * [`metrics`]: accuracy, PSNR, SSIM and the aggregated report.
//! * [`steganalysis`]: LSB baseline, chi-square, sample pairs, RS analysis, fusion and ROC.
//! * [`channel`]: message in, stego PNG out (and back) for a trained model.
//! * [`synthetic`]: procedural cover images for tests and desk-scale experiments.

pub mod channel;
pub mod error;
pub mod imagery;
pub mod metrics;
pub mod networks;
pub mod payload;
pub mod steganalysis;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
