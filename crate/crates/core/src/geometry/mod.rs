//! Rigid-body geometry: point clouds, transforms, Euler-angle conventions,
//! deterministic sampling (kNN, farthest point, random downsampling) and
//! registration error metrics.
//!
//! Conventions, fixed crate-wide:
//! - points are column vectors; a transform acts as `y = R x + t`;
//! - Euler angles are intrinsic Z-Y-X in degrees: `R = Rz * Ry * Rx`;
//! - rotation matrices are proper (orthonormal, det +1).

mod euler;
mod metrics;
mod sampling;
mod types;

pub use euler::{euler_to_rotation, rotation_to_euler, EulerAngles};
pub use metrics::{
    geodesic_rotation_deg, registration_error, rotation_angle_deg, translation_error,
    ErrorAccumulator, RegistrationMetrics,
};
pub use sampling::{downsample_indices, farthest_point_indices, knn_indices, knn_rows};
pub use types::{PointCloud, RigidTransform};
