//! Event-inertial odometry back end.
//!
//! Patch-based bundle adjustment over event voxel segments is reduced to a
//! pose-only Hessian factor by Schur complement and fused with IMU
//! preintegration in a keyframe sliding window solved by Levenberg-Marquardt.
//! A synthetic world stands in for sensors and the learned flow predictor.

pub mod backend;
pub mod camera;
pub mod dba;
pub mod eval;
pub mod event;
pub mod geometry;
pub mod imu;
pub mod init;
pub mod patch_graph;
pub mod pipeline;
pub mod provider;
pub mod sim;

pub use camera::Intrinsics;
pub use geometry::{Pose, Twist};
