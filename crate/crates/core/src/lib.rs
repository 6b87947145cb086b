//! Sparse-voxel tensor engine and learned dynamic point cloud geometry codec.
//!
//! Frames are voxelized into [`voxel::SparseTensor`]s, encoded to a latent
//! at 1/4 resolution, predicted from the previous decoded latent with
//! feature-space motion estimation and adaptively weighted interpolation,
//! and the prediction residual is entropy coded. Coordinates travel through
//! a lossless octree coder.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod octree;
pub mod selftest;
pub mod synthetic;
pub mod voxel;

pub use error::{Error, Result};
