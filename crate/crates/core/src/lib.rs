//! Fingertip segmentation from grayscale hand images.
//!
//! The crate covers the whole experimental stack: a synthetic hand-image
//! generator standing in for private data ([`imgdata`]), paired image/mask
//! augmentation ([`augment`]), the residual-encoder + FPN model family with
//! analytic parameter and MAC accounting ([`model`]), the soft Jaccard loss,
//! micro-averaged metrics and an Otsu baseline ([`lossmetrics`]), and an
//! SGD-with-momentum trainer ([`trainer`]).

pub mod augment;
pub mod config;
pub mod error;
pub mod imgdata;
pub mod lossmetrics;
pub mod model;
pub mod run;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Background plus four fingertips on each hand.
pub const NUM_CLASSES: usize = 9;
