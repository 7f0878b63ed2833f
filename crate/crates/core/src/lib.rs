//! Deterministic two-stage rectified-flow prediction of dense geometry
//! (disparity and surface normals) on procedurally generated scenes.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: reverse-mode tensor engine.
//! - [`codec`]: fixed latent codecs and the 2x2 pack/unpack rearrangement.
//! - [`backbone`]: the convolutional velocity network and its continuity head.
//! - [`flows`]: time grids, flow variants, training targets and Euler sampling.
//! - [`scenes`]: the ray-cast synthetic dataset.
//! - [`metrics`]: affine-invariant depth metrics, normal metrics, ranking and
//!   radial power spectra.
//! - [`harness`]: training, two-stage inference, evaluation, ablations and
//!   checkpoint persistence.

pub mod backbone;
pub mod codec;
pub mod error;
pub mod flows;
pub mod harness;
pub mod imageio;
pub mod metrics;
pub mod numerics;
pub mod scenes;

pub use error::{Error, Result};
