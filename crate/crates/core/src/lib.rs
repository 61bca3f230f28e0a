//! Volumetric lesion segmentation with a 3D residual encoder–decoder.
//!
//! The crate is self-contained: it carries its own reverse-mode autodiff
//! engine ([`tensor`]), the layers and blocks of the network ([`nn`]), model
//! assembly and checkpoints ([`model`]), losses, Adam and the training loop
//! ([`train`]), NIfTI-1 I/O and preprocessing ([`volume`]), synthetic
//! phantoms ([`phantom`]) and evaluation / post-processing ([`metrics`]).

pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
