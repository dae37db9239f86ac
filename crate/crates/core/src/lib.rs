//! Semi-supervised, class-imbalanced binary segmentation for crack detection
//! and road component extraction.
//!
//! The pieces fit together like this:
//!
//! - [`data`] generates synthetic crack/road datasets, reads and writes the
//!   on-disk layout, and splits ids into labeled/unlabeled pools.
//! - [`crop`] samples pairs of overlapping random crops from one image and
//!   gives exact pixel correspondence over the overlap at any feature stride.
//! - [`losses`] holds every optimization term: the confidence-gated
//!   directional contrastive loss, the class-frequency balance loss, the
//!   construction (squared-error) loss, weight decay, and the multi-stage
//!   total — each with analytic gradients.
//! - [`network`] is the CR-Seg backbone: five VGG-16-style stages with SeLU
//!   activations, one-channel side outputs upsampled to input size,
//!   concatenation fusion, and per-stage pixel embedding heads; plus the
//!   surface → edge/centerline road cascade.
//! - [`trainer`] runs the semi-supervised loop: labeled branch (balance +
//!   construction on all side and fused outputs), unlabeled branch
//!   (crop-pair contrastive per stage), SGD with momentum and a step
//!   learning-rate schedule.
//! - [`eval`] computes per-class IOU and the best-threshold MIOU sweep.
//!
//! The `parallel` feature (on by default) runs batch work on rayon; results
//! are bit-identical to the sequential fallback because every parallel unit
//! is an independent pure computation and reductions happen in a fixed order.

pub mod crop;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod rng;
pub mod trainer;

pub(crate) mod par;

pub use error::{Error, Result};
