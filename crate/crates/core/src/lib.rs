//! Human-object spatial-relation prior learned from multi-view 2D keypoints.
//!
//! The crate groups 2D keypoint observations by ray consistency, fits a
//! conditional normalizing flow over ray bundles, and refines 3D human-object
//! configurations against that density plus reprojection and contact terms.

pub mod adam;
pub mod annotation;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod geometry;
pub mod grouping;
pub mod kinematics;
pub mod optimizer;
pub mod pipeline;
pub mod projection;

pub use error::{Error, Result};
