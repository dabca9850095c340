//! Synthetic test harness: analytic scenes, rendered RGB-D and eye-tracker
//! frames, and gaze sessions with exact ground truth.

pub mod dataset;
pub mod demo;
pub mod scene;
pub mod session;
pub mod texture;

use thiserror::Error;

pub use scene::{Logo, Scene, SceneSpec, SurfaceHit};
pub use session::{simulate_gaze_session, GazeTruth, SessionSpec, SimulatedSession, TrajectorySpec};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("camera at {0:?} is inside scene geometry")]
    CameraInsideGeometry([f64; 3]),
    #[error("gaze target behind the camera at t={0}")]
    TargetBehindCamera(f64),
    #[error(transparent)]
    Format(#[from] crate::io::FormatError),
    #[error(transparent)]
    Roi(#[from] crate::roi::RoiError),
}
