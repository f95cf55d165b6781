//! Seeded procedural point clouds for tests and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("shape generators need at least one point".into()));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{name} must be positive: {v}")));
    }
    Ok(())
}

/// `n` points uniform on a sphere of the given radius (Gaussian-direction
/// method).
pub fn sphere_surface(n: usize, radius: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    check_count(n)?;
    check_positive("sphere radius", radius)?;
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 1e-9 {
            continue;
        }
        points.push([radius * v[0] / norm, radius * v[1] / norm, radius * v[2] / norm]);
    }
    PointCloud::new(points)
}

/// `n` points uniform on the surface of an axis-aligned cube with the given
/// half-extent, centered at the origin.
pub fn cube_surface(n: usize, half: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    check_count(n)?;
    check_positive("cube half-extent", half)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let face = rng.gen_range(0..6usize);
        let u = rng.gen_range(-half..=half);
        let v = rng.gen_range(-half..=half);
        let p = match face {
            0 => [half, u, v],
            1 => [-half, u, v],
            2 => [u, half, v],
            3 => [u, -half, v],
            4 => [u, v, half],
            _ => [u, v, -half],
        };
        points.push(p);
    }
    PointCloud::new(points)
}

/// `n` points on a torus (major radius around the z axis, tube of minor
/// radius). Angle-uniform, which is adequate for benchmark geometry.
pub fn torus_surface(n: usize, major: f64, minor: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    check_count(n)?;
    check_positive("torus major radius", major)?;
    check_positive("torus minor radius", minor)?;
    if minor >= major {
        return Err(Error::Config(format!(
            "torus minor radius {minor} must be below the major radius {major}"
        )));
    }
    let tau = std::f64::consts::TAU;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = rng.gen_range(0.0..tau);
        let phi = rng.gen_range(0.0..tau);
        let ring = major + minor * phi.cos();
        points.push([ring * theta.cos(), ring * theta.sin(), minor * phi.sin()]);
    }
    PointCloud::new(points)
}

/// A driving-style scene: a ground plane at y = 0 plus box-shaped structures
/// scattered within `extent` meters of the origin. `n_ground` points sample
/// the plane, `n_structure` the boxes; structure points sit above the ground
/// so plane removal keeps them.
pub fn synthetic_scan(
    n_ground: usize,
    n_structure: usize,
    extent: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    check_count(n_ground + n_structure)?;
    check_positive("scene extent", extent)?;
    let mut points = Vec::with_capacity(n_ground + n_structure);
    for _ in 0..n_ground {
        points.push([
            rng.gen_range(-extent..extent),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-extent..extent),
        ]);
    }
    if n_structure > 0 {
        let boxes = 1 + n_structure / 64;
        let centers: Vec<[f64; 3]> = (0..boxes)
            .map(|_| {
                [
                    rng.gen_range(-0.8 * extent..0.8 * extent),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(-0.8 * extent..0.8 * extent),
                ]
            })
            .collect();
        for i in 0..n_structure {
            let c = centers[i % boxes];
            points.push([
                c[0] + rng.gen_range(-1.0..1.0),
                (c[1] + rng.gen_range(-1.0..1.0)).max(0.6),
                c[2] + rng.gen_range(-1.0..1.0),
            ]);
        }
    }
    PointCloud::new(points)
}
