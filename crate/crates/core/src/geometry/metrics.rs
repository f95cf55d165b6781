//! Registration error metrics.
//!
//! Rotation error is reported on Euler-angle residuals (degrees, Z-Y-X
//! convention) and translation error on per-axis residuals, aggregated as
//! RMSE / MAE / MSE over every recorded pair. The geodesic rotation
//! distance is exposed separately as a diagnostic.

use nalgebra::Matrix3;

use crate::geometry::{rotation_to_euler, RigidTransform};

/// Aggregate error statistics over one or more registered pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationMetrics {
    pub rot_rmse: f64,
    pub rot_mae: f64,
    pub rot_mse: f64,
    pub trans_rmse: f64,
    pub trans_mae: f64,
    pub trans_mse: f64,
}

/// Accumulates per-axis residuals across pairs; `finalize` reduces them.
#[derive(Debug, Clone, Default)]
pub struct ErrorAccumulator {
    rot_residuals: Vec<f64>,
    trans_residuals: Vec<f64>,
}

impl ErrorAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, estimate: &RigidTransform, truth: &RigidTransform) {
        let (ee, _) = rotation_to_euler(&estimate.rotation);
        let (et, _) = rotation_to_euler(&truth.rotation);
        for (a, b) in ee.as_array().iter().zip(et.as_array()) {
            self.rot_residuals.push(a - b);
        }
        for axis in 0..3 {
            self.trans_residuals
                .push(estimate.translation[axis] - truth.translation[axis]);
        }
    }

    pub fn pairs(&self) -> usize {
        self.rot_residuals.len() / 3
    }

    pub fn finalize(&self) -> RegistrationMetrics {
        let (rot_mse, rot_mae) = mse_mae(&self.rot_residuals);
        let (trans_mse, trans_mae) = mse_mae(&self.trans_residuals);
        RegistrationMetrics {
            rot_rmse: rot_mse.sqrt(),
            rot_mae,
            rot_mse,
            trans_rmse: trans_mse.sqrt(),
            trans_mae,
            trans_mse,
        }
    }
}

fn mse_mae(res: &[f64]) -> (f64, f64) {
    if res.is_empty() {
        return (0.0, 0.0);
    }
    let n = res.len() as f64;
    let mse = res.iter().map(|r| r * r).sum::<f64>() / n;
    let mae = res.iter().map(|r| r.abs()).sum::<f64>() / n;
    (mse, mae)
}

/// Metrics for a single estimate/truth pair.
pub fn registration_error(estimate: &RigidTransform, truth: &RigidTransform) -> RegistrationMetrics {
    let mut acc = ErrorAccumulator::new();
    acc.add(estimate, truth);
    acc.finalize()
}

/// Geodesic distance between two rotations, in degrees:
/// `acos((trace(a^T b) - 1) / 2)`.
pub fn geodesic_rotation_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let t = (a.transpose() * b).trace();
    let c = ((t - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Rotation magnitude in degrees: geodesic distance from the identity.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    geodesic_rotation_deg(r, &Matrix3::identity())
}

/// Euclidean distance between the translations of two transforms.
pub fn translation_error(estimate: &RigidTransform, truth: &RigidTransform) -> f64 {
    (estimate.translation - truth.translation).norm()
}
