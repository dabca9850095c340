//! Offline 3D gaze mapping: RGB-D mapping into an occupancy grid and mesh,
//! monocular localization of eye-tracker frames, fixation ray casting,
//! logo-based regions of interest and attention metrics.
//!
//! The geometric kernels are generic over [`Real`] (`f32` or `f64`); the
//! pipeline itself runs in `f64`.

pub mod gaze;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod polygon;
pub mod raster;
pub mod roi;
pub mod scalar;
pub mod slam;
pub mod synth;
pub mod surface;
pub mod volume;

pub use geometry::{Intrinsics, Pose6D, Ray};
pub use scalar::Real;

pub type Pose6Df32 = Pose6D<f32>;
pub type Pose6Df64 = Pose6D<f64>;
pub type Intrinsicsf32 = Intrinsics<f32>;
pub type Intrinsicsf64 = Intrinsics<f64>;
pub type Rayf32 = Ray<f32>;
pub type Rayf64 = Ray<f64>;
