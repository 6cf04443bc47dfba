//! Core algorithms for reconstructing super-resolved intensity images from
//! event-camera streams.
//!
//! Everything here is pure computation over in-memory data and builds with
//! `#![no_std]` + `alloc`. File formats, the command line and the training
//! driver live in the `evsr` companion crate.
//!
//! Module map:
//!
//! - [`events`]: events, validated streams, the `t x y p` text format.
//! - [`stacking`]: count-based event stacks and stack sequences.
//! - [`image`]: grayscale frames used by the simulator, flow and metrics.
//! - [`simulator`]: planar-scene renderer and contrast-threshold event generator.
//! - [`flow`]: coarse-to-fine dense flow, backward warping, occlusion masks.
//! - [`autograd`]: dense NCHW tensors and a reverse-mode tape.
//! - [`network`]: rectification, recurrent super-resolution cell, mixer, pipeline.
//! - [`loss`]: L1, perceptual feature distance, combined similarity loss.
//! - [`metrics`]: PSNR, SSIM, MSE and temporal warping error.
//! - [`train`]: learning-rate schedule, Adam, gradient clipping, per-sample steps.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod events;
pub mod flow;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod simulator;
pub mod stacking;
pub mod train;

pub use autograd::{Graph, NodeId, Scalar, Tensor};
pub use events::{Event, EventStream, Polarity};
pub use image::GrayImage;
