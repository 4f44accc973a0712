//! Mirror-aware Gaussian splatting.
//!
//! Gaussians carry a learnable mirror factor alongside the usual opacity. A
//! mask render driven by the mirror factor supervises those factors against
//! ground-truth mirror masks; the centers of high-probability mirror splats
//! then yield the mirror plane through RANSAC. Gaussians are reflected across
//! that plane so content seen only in the mirror fills in the real scene, and
//! both halves are optimized jointly under a symmetry-consistency loss.

pub mod camera;
pub mod checkpoint;
pub mod colmap;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod image;
pub mod loss;
pub mod mirror;
pub mod optim;
pub mod pipeline;
pub mod ply;
pub mod raster;
pub mod sh;
pub mod ssim;
pub mod synthetic;
pub mod train;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{Covariance3, Gaussian3D, SideTag};
pub use image::Image;
pub use mirror::{MirrorPlane, ReflectionTransform};
pub use raster::{RenderMode, RenderOutput, RenderSettings};
