//! Iterative closest point baseline and refinement.
//!
//! Classic point-to-point ICP: brute-force nearest neighbors, a closed-form
//! rigid update per iteration, and a residual trace. Without a
//! correspondence gate the recorded mean squared nearest-neighbor distance
//! is non-increasing from one iteration to the next, because each update
//! minimizes the current correspondence objective exactly.

use crate::correspondence::solve_svd;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

/// ICP tunables. The iteration cap defaults to 10, matching the benchmark
/// baseline.
#[derive(Debug, Clone)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop early when an update moves by less than this (rotation angle in
    /// radians plus translation norm).
    pub convergence_threshold: f64,
    /// Drop correspondences farther than this distance before solving.
    /// Residual reporting still covers every source point.
    pub max_correspondence_distance: Option<f64>,
    /// Warm start, e.g. a learned estimate to refine.
    pub initial: Option<RigidTransform>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 10,
            convergence_threshold: 1e-10,
            max_correspondence_distance: None,
            initial: None,
        }
    }
}

/// Outcome of an ICP run.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Mean squared nearest-neighbor distance before each update, plus a
    /// final entry under the returned transform (`iterations + 1` values).
    pub residuals: Vec<f64>,
    /// Number of rigid updates performed.
    pub iterations: usize,
}

struct Matches {
    /// Index of the nearest target point per source point.
    nearest: Vec<usize>,
    /// Mean squared nearest-neighbor distance over all source points.
    mean_sq: f64,
}

fn nearest_neighbors(moved: &[[f64; 3]], target: &[[f64; 3]]) -> Matches {
    let mut nearest = Vec::with_capacity(moved.len());
    let mut total = 0.0;
    for p in moved {
        let mut best = (f64::INFINITY, 0usize);
        for (j, q) in target.iter().enumerate() {
            let d = (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum::<f64>();
            if d < best.0 {
                best = (d, j);
            }
        }
        total += best.0;
        nearest.push(best.1);
    }
    Matches { nearest, mean_sq: total / moved.len() as f64 }
}

/// Runs ICP from `config.initial` (or the identity). Errors if the gated
/// correspondence set ever drops below three pairs or becomes degenerate.
pub fn icp(source: &PointCloud, target: &PointCloud, config: &IcpConfig) -> Result<IcpResult> {
    if config.max_iterations == 0 {
        return Err(Error::Config("icp needs at least one iteration".into()));
    }
    if !(config.convergence_threshold.is_finite() && config.convergence_threshold >= 0.0) {
        return Err(Error::Config(format!(
            "icp convergence threshold must be non-negative: {}",
            config.convergence_threshold
        )));
    }
    if let Some(gate) = config.max_correspondence_distance {
        if !(gate.is_finite() && gate > 0.0) {
            return Err(Error::Config(format!("icp correspondence gate must be positive: {gate}")));
        }
    }

    let mut transform = config.initial.clone().unwrap_or_else(RigidTransform::identity);
    let targets = target.points();
    let mut residuals = Vec::with_capacity(config.max_iterations + 1);
    let mut iterations = 0;

    for _ in 0..config.max_iterations {
        let moved = transform.apply_cloud(source);
        let matches = nearest_neighbors(moved.points(), targets);
        residuals.push(matches.mean_sq);

        let mut from = Vec::with_capacity(moved.len());
        let mut to = Vec::with_capacity(moved.len());
        for (i, p) in moved.points().iter().enumerate() {
            let q = targets[matches.nearest[i]];
            if let Some(gate) = config.max_correspondence_distance {
                let d = (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum::<f64>().sqrt();
                if d > gate {
                    continue;
                }
            }
            from.push(*p);
            to.push(q);
        }
        if from.len() < 3 {
            return Err(Error::DegenerateGeometry(format!(
                "icp gate left {} correspondences; at least 3 are required",
                from.len()
            )));
        }

        let delta = solve_svd(&from, &to)?;
        transform = delta.compose(&transform);
        iterations += 1;

        let step = delta.rotation_angle_deg().to_radians() + delta.translation_norm();
        if step <= config.convergence_threshold {
            break;
        }
    }

    let final_moved = transform.apply_cloud(source);
    residuals.push(nearest_neighbors(final_moved.points(), targets).mean_sq);

    Ok(IcpResult { transform, residuals, iterations })
}
