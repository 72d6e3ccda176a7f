//! Core library for compacting 3D Gaussian splat maps.
//!
//! A splat map is an ordered collection of anisotropic 3D Gaussian primitives
//! (mean, rotation, scale, opacity, color). This crate provides:
//!
//! - domain types and the covariance ↔ (rotation, scale) bridge ([`gaussian`]),
//! - voxel-space merging of geometrically similar primitives ([`merge`]),
//! - patch-grid densification of sparse keypoint sets ([`sampler`]),
//! - a CPU forward splatting renderer with image quality metrics ([`render`]),
//! - an L-BFGS minimizer and quaternion slerp ([`optim`]),
//! - binary PLY / CSV / PNG / pose-file I/O ([`io`]).

pub mod camera;
pub mod frame;
pub mod gaussian;
pub mod io;
pub mod merge;
pub mod optim;
pub mod render;
pub mod sampler;

pub use camera::{CameraPose, PinholeIntrinsics};
pub use gaussian::{CovarianceMatrix, GaussianPrimitive, SplatMap};
