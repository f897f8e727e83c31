//! Unsupervised super-resolution for fibre-bundle endomicroscopy.
//!
//! The crate is organised around the acquisition physics of a coherent
//! fibre bundle:
//!
//! * [`geometry`]: fibre layouts, Voronoi pixel labelling and Delaunay
//!   interpolation from fibre centres to the pixel grid.
//! * [`forward_model`]: the operators between image space and fibre space
//!   (Voronoi vectorisation, Delaunay reconstruction, synthetic LR frames).
//! * [`losses`]: the cycle-consistency, adversarial and row/column-mean
//!   terms of the generator objective, plus the discriminator objective.
//! * [`models`]: the residual generator and the convolutional discriminator.
//! * [`trainer`]: Adam and the alternating adversarial loop.
//! * [`metrics`]: SSIM, global contrast factor and the composite score.
//! * [`data`]: frame normalisation, patching, grouped splits and the
//!   target-domain builders.

pub mod data;
pub mod error;
pub mod forward_model;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use forward_model::{FibreVector, NoiseModel};
pub use geometry::{FibreLayout, Point};
pub use image::Image;
