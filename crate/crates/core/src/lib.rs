//! Forward engine for text-feature 3D Gaussian scenes.
//!
//! The crate renders expected depth and feature maps from anisotropic feature
//! Gaussians, grows scenes by feed-forward densification, samples multi-view
//! feature planes inside each Gaussian's ellipsoid, runs asymmetric masked
//! attention over Gaussian queries, evaluates the rendering losses, and turns
//! the final scene into a semantic voxel grid with open-vocabulary queries.
//!
//! Data-parallel loops use rayon when the `parallel` feature is on (default);
//! without it the same code runs sequentially and produces identical bytes.

pub mod attention;
pub mod bench;
pub mod camera;
pub mod densify;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod plane;
pub mod raster;
pub mod sampling;
pub mod synth;
pub mod voxel;

pub use camera::{backproject, project_point, CameraView, Intrinsics, Projection, Z_NEAR};
pub use error::{Error, Result};
pub use gaussian::{FeatureGaussian, GaussianScene};
pub use geometry::{covariance3d, quat_to_rotmat, Mat3, Pose, Quat, Vec3};
pub use plane::{DepthMap, Plane};
pub use raster::{render, render_oracle, Projected2D, RenderOutput};
