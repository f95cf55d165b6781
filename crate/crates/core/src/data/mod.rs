//! Benchmark pair construction and data preparation.
//!
//! Four evaluation protocols, all seeded and deterministic:
//! - `whole`: downsample, then a random motion; source and target contain
//!   the same points (up to the motion);
//! - `noisy`: `whole` plus Gaussian perturbation of the target;
//! - `partial`: two independent nearest-neighbor crops around random
//!   viewpoints, so the clouds only partially overlap;
//! - `scan`: radius crop, RANSAC ground removal, then two independent
//!   downsamples and a driving-style motion (wide yaw, small roll/pitch,
//!   mostly planar translation).

mod formats;
mod shapes;

pub use formats::{
    read_kitti_bin, read_off, read_ply, registration_ply, write_kitti_bin, write_off, write_ply,
    PlyPoint, COLOR_SOURCE, COLOR_TARGET, COLOR_VIRTUAL,
};
pub use shapes::{cube_surface, sphere_surface, synthetic_scan, torus_surface};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{downsample_indices, euler_to_rotation, EulerAngles, PointCloud, RigidTransform};

/// A deterministic RNG for substream `stream` of a base seed. Streams mix
/// through a golden-ratio multiply so neighboring indices decorrelate.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Per-axis sampling ranges for random rigid motions (degrees and meters).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRanges {
    pub z_deg: (f64, f64),
    pub y_deg: (f64, f64),
    pub x_deg: (f64, f64),
    pub tx: (f64, f64),
    pub ty: (f64, f64),
    pub tz: (f64, f64),
}

impl TransformRanges {
    /// Object-scale protocol: angles in [0, 45] degrees per axis,
    /// translations in [-0.5, 0.5] per axis.
    pub fn object() -> Self {
        TransformRanges {
            z_deg: (0.0, 45.0),
            y_deg: (0.0, 45.0),
            x_deg: (0.0, 45.0),
            tx: (-0.5, 0.5),
            ty: (-0.5, 0.5),
            tz: (-0.5, 0.5),
        }
    }

    /// Like [`TransformRanges::object`] but with rotations capped at
    /// `max_deg` — used for easy evaluation splits.
    pub fn object_capped(max_deg: f64) -> Self {
        let mut r = Self::object();
        r.z_deg = (0.0, max_deg);
        r.y_deg = (0.0, max_deg);
        r.x_deg = (0.0, max_deg);
        r
    }

    /// Driving-scan protocol: yaw (the Y axis in the camera convention)
    /// in [-30, 30] degrees, the other two angles in [-5, 5] degrees,
    /// x/z translation in [-5, 5] m and vertical y in [-1, 1] m.
    pub fn scan() -> Self {
        TransformRanges {
            z_deg: (-5.0, 5.0),
            y_deg: (-30.0, 30.0),
            x_deg: (-5.0, 5.0),
            tx: (-5.0, 5.0),
            ty: (-1.0, 1.0),
            tz: (-5.0, 5.0),
        }
    }
}

/// Samples a rigid motion uniformly within `ranges`. Draw order is fixed
/// (z, y, x angles, then x, y, z translation) so seeds reproduce exactly.
pub fn random_transform(ranges: &TransformRanges, rng: &mut impl Rng) -> RigidTransform {
    let mut take = |lo_hi: (f64, f64)| -> f64 {
        if lo_hi.0 == lo_hi.1 {
            lo_hi.0
        } else {
            rng.gen_range(lo_hi.0..lo_hi.1)
        }
    };
    let angles = EulerAngles::new(take(ranges.z_deg), take(ranges.y_deg), take(ranges.x_deg));
    let t = nalgebra::Vector3::new(take(ranges.tx), take(ranges.ty), take(ranges.tz));
    RigidTransform::from_parts(euler_to_rotation(&angles), t)
        .expect("euler matrices are proper rotations")
}

/// Adds isotropic Gaussian noise to every coordinate.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be non-negative: {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            [
                p[0] + normal.sample(rng),
                p[1] + normal.sample(rng),
                p[2] + normal.sample(rng),
            ]
        })
        .collect();
    PointCloud::new(points)
}

/// The `count` points nearest to a viewpoint drawn uniformly in the cloud's
/// bounding box — a contiguous directional crop.
pub fn partial_crop(cloud: &PointCloud, count: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let count = count.min(cloud.len());
    if count == 0 {
        return Err(Error::Config("partial crop needs count > 0".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for p in cloud.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let viewpoint = [
        rng.gen_range(lo[0]..=hi[0]),
        rng.gen_range(lo[1]..=hi[1]),
        rng.gen_range(lo[2]..=hi[2]),
    ];
    let mut scored: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d: f64 = (0..3).map(|a| (p[a] - viewpoint[a]) * (p[a] - viewpoint[a])).sum();
            (d, i)
        })
        .collect();
    scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let indices: Vec<usize> = scored[..count].iter().map(|&(_, i)| i).collect();
    cloud.select(&indices)
}

/// A plane `normal . p = offset` with a unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    pub fn distance(&self, p: &[f64; 3]) -> f64 {
        (self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] - self.offset).abs()
    }
}

/// Outcome of RANSAC ground removal.
#[derive(Debug, Clone)]
pub enum GroundRemoval {
    /// A dominant plane was found and its inliers removed.
    Removed {
        kept: PointCloud,
        plane: Plane,
        inliers: usize,
    },
    /// No plane reached the inlier floor; the cloud is left unchanged.
    NoPlane,
    /// Every point is an inlier of the plane: removal would empty the cloud.
    AllGround { plane: Plane },
}

/// Fraction of points a candidate plane must explain to count as ground.
pub const GROUND_INLIER_FLOOR: f64 = 0.2;

/// RANSAC plane detection and removal. Samples `iterations` random point
/// triples, keeps the plane with the most points within
/// `distance_threshold`, and removes those inliers if the plane explains at
/// least [`GROUND_INLIER_FLOOR`] of the cloud.
pub fn remove_ground_ransac(
    cloud: &PointCloud,
    distance_threshold: f64,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<GroundRemoval> {
    if !(distance_threshold.is_finite() && distance_threshold > 0.0) {
        return Err(Error::Config(format!(
            "ground distance threshold must be positive: {distance_threshold}"
        )));
    }
    if iterations == 0 {
        return Err(Error::Config("ground removal needs at least one iteration".into()));
    }
    let pts = cloud.points();
    let n = pts.len();
    if n < 3 {
        return Ok(GroundRemoval::NoPlane);
    }
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let (a, b, c) = (pts[i], pts[j], pts[k]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        if norm < 1e-12 {
            continue; // collinear sample
        }
        let normal = [cross[0] / norm, cross[1] / norm, cross[2] / norm];
        let offset = normal[0] * a[0] + normal[1] * a[1] + normal[2] * a[2];
        let plane = Plane { normal, offset };
        let inliers = pts.iter().filter(|p| plane.distance(p) <= distance_threshold).count();
        if best.as_ref().map_or(true, |(bi, _)| inliers > *bi) {
            best = Some((inliers, plane));
        }
    }
    let Some((inliers, plane)) = best else {
        return Ok(GroundRemoval::NoPlane);
    };
    if (inliers as f64) < GROUND_INLIER_FLOOR * n as f64 {
        return Ok(GroundRemoval::NoPlane);
    }
    let kept: Vec<[f64; 3]> = pts
        .iter()
        .filter(|p| plane.distance(p) > distance_threshold)
        .copied()
        .collect();
    if kept.is_empty() {
        return Ok(GroundRemoval::AllGround { plane });
    }
    Ok(GroundRemoval::Removed {
        kept: PointCloud::new(kept)?,
        plane,
        inliers,
    })
}

/// Which pair-construction protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Whole,
    Noisy,
    Partial,
    Scan,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(Protocol::Whole),
            "noisy" => Ok(Protocol::Noisy),
            "partial" => Ok(Protocol::Partial),
            "scan" => Ok(Protocol::Scan),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected whole, noisy, partial or scan)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Whole => "whole",
            Protocol::Noisy => "noisy",
            Protocol::Partial => "partial",
            Protocol::Scan => "scan",
        }
    }
}

/// Tunables for pair construction; defaults follow the evaluation protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Downsample size for whole/noisy/scan (1024 by default).
    pub sample_size: usize,
    /// Std-dev of target perturbation in the noisy protocol.
    pub noise_sigma: f64,
    /// Crop size for the partial protocol.
    pub partial_size: usize,
    /// Radius crop applied before ground removal in the scan protocol (m).
    pub scan_radius: f64,
    /// RANSAC inlier distance for ground removal (m).
    pub ground_distance: f64,
    /// RANSAC iteration budget.
    pub ground_iterations: usize,
    /// Cap on rotation magnitude for easy splits (None: protocol default).
    pub rotation_cap_deg: Option<f64>,
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol) -> Self {
        ProtocolConfig {
            protocol,
            sample_size: 1024,
            noise_sigma: 0.01,
            partial_size: 768,
            scan_radius: 40.0,
            ground_distance: 0.3,
            ground_iterations: 100,
            rotation_cap_deg: None,
        }
    }

    fn ranges(&self) -> TransformRanges {
        let base = match self.protocol {
            Protocol::Scan => TransformRanges::scan(),
            _ => TransformRanges::object(),
        };
        match self.rotation_cap_deg {
            Some(cap) if self.protocol != Protocol::Scan => TransformRanges::object_capped(cap),
            _ => base,
        }
    }
}

/// One benchmark instance: two clouds and the motion that explains them
/// (target ≈ truth(source-counterpart)).
#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub truth: RigidTransform,
}

/// Builds a source/target pair from a base cloud under the configured
/// protocol. Deterministic for a fixed (base, config, rng state).
pub fn make_pair(
    base: &PointCloud,
    cfg: &ProtocolConfig,
    rng: &mut impl Rng,
) -> Result<RegistrationPair> {
    match cfg.protocol {
        Protocol::Whole => {
            let source = downsample(base, cfg.sample_size, rng)?;
            let truth = random_transform(&cfg.ranges(), rng);
            let target = truth.apply_cloud(&source);
            Ok(RegistrationPair { source, target, truth })
        }
        Protocol::Noisy => {
            let source = downsample(base, cfg.sample_size, rng)?;
            let truth = random_transform(&cfg.ranges(), rng);
            let clean = truth.apply_cloud(&source);
            let target = add_gaussian_noise(&clean, cfg.noise_sigma, rng)?;
            Ok(RegistrationPair { source, target, truth })
        }
        Protocol::Partial => {
            let pool = downsample(base, cfg.sample_size, rng)?;
            let truth = random_transform(&cfg.ranges(), rng);
            let moved = truth.apply_cloud(&pool);
            let source = partial_crop(&pool, cfg.partial_size, rng)?;
            let target = partial_crop(&moved, cfg.partial_size, rng)?;
            Ok(RegistrationPair { source, target, truth })
        }
        Protocol::Scan => {
            let cropped = radius_crop(base, cfg.scan_radius)?;
            let after_ground =
                match remove_ground_ransac(&cropped, cfg.ground_distance, cfg.ground_iterations, rng)? {
                    GroundRemoval::Removed { kept, .. } => kept,
                    GroundRemoval::NoPlane => cropped,
                    GroundRemoval::AllGround { .. } => {
                        return Err(Error::DegenerateGeometry(
                            "every point within the scan radius lies on the detected ground plane"
                                .into(),
                        ))
                    }
                };
            let source = downsample(&after_ground, cfg.sample_size, rng)?;
            let second = downsample(&after_ground, cfg.sample_size, rng)?;
            let truth = random_transform(&cfg.ranges(), rng);
            let target = truth.apply_cloud(&second);
            Ok(RegistrationPair { source, target, truth })
        }
    }
}

fn downsample(cloud: &PointCloud, count: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let count = count.min(cloud.len());
    let idx = downsample_indices(cloud.len(), count, rng)?;
    cloud.select(&idx)
}

fn radius_crop(cloud: &PointCloud, radius: f64) -> Result<PointCloud> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Config(format!("scan radius must be positive: {radius}")));
    }
    let kept: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .filter(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= radius)
        .copied()
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateGeometry(format!(
            "no points within scan radius {radius}"
        )));
    }
    PointCloud::new(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn whole_pairs_are_exact_transforms_of_each_other() {
        let base = sphere_surface(200, 1.0, &mut rng(1)).unwrap();
        let cfg = ProtocolConfig {
            sample_size: 64,
            ..ProtocolConfig::new(Protocol::Whole)
        };
        let pair = make_pair(&base, &cfg, &mut rng(2)).unwrap();
        assert_eq!(pair.source.len(), 64);
        assert_eq!(pair.target.len(), 64);
        let moved = pair.truth.apply_cloud(&pair.source);
        assert_eq!(moved, pair.target);
    }

    #[test]
    fn random_transform_respects_ranges() {
        let ranges = TransformRanges::object();
        for seed in 0..20 {
            let t = random_transform(&ranges, &mut rng(seed));
            let (e, _) = crate::geometry::rotation_to_euler(&t.rotation);
            for a in e.as_array() {
                assert!((-1e-9..=45.0 + 1e-9).contains(&a), "angle {a}");
            }
            for axis in 0..3 {
                assert!(t.translation[axis].abs() <= 0.5);
            }
        }
    }

    #[test]
    fn noisy_pairs_perturb_only_the_target() {
        let base = sphere_surface(100, 1.0, &mut rng(3)).unwrap();
        let cfg = ProtocolConfig {
            sample_size: 50,
            noise_sigma: 0.01,
            ..ProtocolConfig::new(Protocol::Noisy)
        };
        let pair = make_pair(&base, &cfg, &mut rng(4)).unwrap();
        let clean = pair.truth.apply_cloud(&pair.source);
        let mut max_dev: f64 = 0.0;
        for (a, b) in clean.points().iter().zip(pair.target.points()) {
            for axis in 0..3 {
                max_dev = max_dev.max((a[axis] - b[axis]).abs());
            }
        }
        assert!(max_dev > 0.0, "noise must move the target");
        assert!(max_dev < 0.1, "sigma 0.01 stays small, got {max_dev}");
        // source points must come from the base cloud untouched
        for p in pair.source.points() {
            assert!(base.points().contains(p));
        }
    }

    #[test]
    fn partial_pairs_have_the_requested_size() {
        let base = sphere_surface(300, 1.0, &mut rng(5)).unwrap();
        let cfg = ProtocolConfig {
            sample_size: 128,
            partial_size: 96,
            ..ProtocolConfig::new(Protocol::Partial)
        };
        let pair = make_pair(&base, &cfg, &mut rng(6)).unwrap();
        assert_eq!(pair.source.len(), 96);
        assert_eq!(pair.target.len(), 96);
    }

    #[test]
    fn partial_crop_is_contiguous_under_distance_ordering() {
        let base = cube_surface(200, 1.0, &mut rng(7)).unwrap();
        let crop = partial_crop(&base, 50, &mut rng(8)).unwrap();
        assert_eq!(crop.len(), 50);
        for p in crop.points() {
            assert!(base.points().contains(p));
        }
    }

    #[test]
    fn ground_removal_strips_a_dominant_plane() {
        let scene = synthetic_scan(600, 300, 30.0, &mut rng(9)).unwrap();
        let out = remove_ground_ransac(&scene, 0.3, 100, &mut rng(10)).unwrap();
        match out {
            GroundRemoval::Removed { kept, plane, inliers } => {
                assert!(inliers >= 540, "expected most ground inliers, got {inliers}");
                assert!(kept.len() <= 360);
                // detected plane should be roughly horizontal (ground at y=0
                // in the synthetic scene): |normal_y| near 1
                assert!(plane.normal[1].abs() > 0.95, "normal {:?}", plane.normal);
            }
            other => panic!("expected Removed, got {other:?}"),
        }
    }

    #[test]
    fn ground_removal_reports_no_plane_on_a_sphere() {
        let ball = sphere_surface(400, 5.0, &mut rng(11)).unwrap();
        let out = remove_ground_ransac(&ball, 0.05, 100, &mut rng(12)).unwrap();
        assert!(matches!(out, GroundRemoval::NoPlane));
    }

    #[test]
    fn all_ground_is_reported_not_emptied() {
        let mut r = rng(13);
        let flat: Vec<[f64; 3]> = (0..100)
            .map(|_| [r.gen_range(-5.0..5.0), 0.0, r.gen_range(-5.0..5.0)])
            .collect();
        let cloud = PointCloud::new(flat).unwrap();
        let out = remove_ground_ransac(&cloud, 0.3, 50, &mut rng(14)).unwrap();
        assert!(matches!(out, GroundRemoval::AllGround { .. }));
    }

    #[test]
    fn scan_pairs_build_and_stay_in_range() {
        let scene = synthetic_scan(1500, 800, 30.0, &mut rng(15)).unwrap();
        let cfg = ProtocolConfig {
            sample_size: 256,
            ..ProtocolConfig::new(Protocol::Scan)
        };
        let pair = make_pair(&scene, &cfg, &mut rng(16)).unwrap();
        assert_eq!(pair.source.len(), 256);
        assert_eq!(pair.target.len(), 256);
        let (e, _) = crate::geometry::rotation_to_euler(&pair.truth.rotation);
        assert!(e.y_deg.abs() <= 30.0 + 1e-9);
        assert!(e.z_deg.abs() <= 5.0 + 1e-9);
        assert!(e.x_deg.abs() <= 5.0 + 1e-9);
        assert!(pair.truth.translation[1].abs() <= 1.0);
    }

    #[test]
    fn pairs_are_seed_deterministic() {
        let base = sphere_surface(200, 1.0, &mut rng(17)).unwrap();
        let cfg = ProtocolConfig {
            sample_size: 64,
            ..ProtocolConfig::new(Protocol::Noisy)
        };
        let a = make_pair(&base, &cfg, &mut rng(18)).unwrap();
        let b = make_pair(&base, &cfg, &mut rng(18)).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.truth, b.truth);
    }
}
