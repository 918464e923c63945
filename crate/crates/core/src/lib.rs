//! Depth-driven perspective rectification for viewpoint-robust local feature
//! matching.
//!
//! Given a grayscale image, a dense depth map and pinhole intrinsics, the
//! pipeline estimates per-pixel surface normals, clusters them into a
//! Manhattan-like frame, splits the image into connected planar patches and
//! warps each patch to a virtual fronto-parallel view. Features extracted on
//! the rectified patches are mapped back into the original image, so the
//! result is a drop-in replacement for ordinary feature extraction.
//!
//! The [`estimation`] and [`evaluation`] modules provide the two-view
//! machinery (ratio-test matching, RANSAC homography / essential estimation,
//! pose recovery) and the campaign harness used to measure localization rates
//! against ground truth, while [`synthetic`] renders exact oracle scenes.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod io;
pub mod raster;
pub mod rectification;
pub mod segmentation;
pub mod synthetic;

pub use config::{ClusteringMode, RunConfig};
pub use error::{Error, Result};
pub use geometry::{DepthMap, Intrinsics, NormalMap, PointGrid};
pub use raster::{GrayImage, Mask, Raster};
