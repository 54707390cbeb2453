//! Robust alignment of 3D point sets and deformable-shape fitting, plus the
//! image machinery (depth rasterization, pixel warping, ZNCC scoring) needed
//! to frontalize a face from a posed view.
//!
//! The crate is organized around the processing pipeline:
//!
//! - [`geometry`]: point sets, similarity transforms, quaternion rotations,
//!   Mahalanobis norms, and the closed-form weighted alignment used for
//!   initialization.
//! - [`align`]: EM estimation of a similarity transform between two point
//!   sets under a generalized Student-t residual model, robust to outliers.
//! - [`shape`]: linear statistical shape models (PCA over registered
//!   meshes), embeddings, and the confidence ellipsoid.
//! - [`fit`]: robust EM fitting of a deformable shape model to a landmark
//!   set (simultaneous pose, deformation, and noise-model estimation).
//! - [`raster`] / [`warp`]: dense depth-map rasterization over a triangulated
//!   mesh and inverse-mapped pixel warping with occlusion masking.
//! - [`pipeline`]: the end-to-end frontalization driver.
//! - [`zncc`]: zero-mean normalized cross-correlation scoring with shift
//!   search and landmark-based scale normalization.
//!
//! The crate is `no_std` (with `alloc`); all file formats and CLI live in the
//! companion `frontal` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod align;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod image;
pub mod pipeline;
pub mod raster;
pub mod shape;
pub mod special;
pub mod warp;
pub mod zncc;

pub use error::{Error, Result};
pub use geometry::{Covariance3, PointSet3, SimilarityTransform};
