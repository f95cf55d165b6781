//! Core geometric value types.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// A non-empty set of 3-D points with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("PointCloud::new", "a point cloud needs at least one point"));
        }
        if let Some((i, _)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::domain(
                "PointCloud::new",
                format!("point {i} has non-finite coordinates"),
            ));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor guarantees at least one point
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Rows-as-points `[N, 3]` tensor for the numeric stack.
    pub fn to_tensor(&self) -> Tensor {
        let values: Vec<f64> = self.points.iter().flatten().copied().collect();
        Tensor::matrix(self.points.len(), 3, values).expect("points are 3-wide")
    }

    /// Builds a cloud from selected indices of this one.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::domain("PointCloud::select", format!("index {i} out of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(points)
    }
}

/// Proper rigid motion: rotation then translation, `y = R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// How far a matrix may drift from exact orthonormality before
/// [`RigidTransform::from_parts`] rejects it.
const ORTHONORMAL_TOL: f64 = 1e-6;

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let drift = (gram - Matrix3::identity()).norm();
        if drift > ORTHONORMAL_TOL {
            return Err(Error::domain(
                "RigidTransform::from_parts",
                format!("rotation is not orthonormal (|R^T R - I| = {drift:.3e})"),
            ));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::domain(
                "RigidTransform::from_parts",
                format!("rotation determinant is {det:.6}, expected +1"),
            ));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud.points().iter().map(|&p| self.apply(p)).collect();
        PointCloud::new(points).expect("rigid motion preserves cloud size and finiteness")
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation magnitude in degrees (geodesic distance from the identity).
    pub fn rotation_angle_deg(&self) -> f64 {
        super::rotation_angle_deg(&self.rotation)
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }
}
