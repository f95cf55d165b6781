//! From score matrix to rigid motion: keypoint selection, candidate
//! restriction, soft-pointer virtual correspondences, and the closed-form
//! SVD solver.
//!
//! Selection is deterministic: all score ties break toward the lower index.
//! The soft pointer never commits to a single match — each keypoint's
//! virtual corresponding point is a convex combination of its candidates'
//! coordinates, which keeps the whole correspondence step differentiable.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::geometry::{PointCloud, RigidTransform};
use crate::numeric::{Graph, Tensor, Var};

/// Number of keypoints drawn from a source cloud of `n1` points.
pub fn keypoint_count(n1: usize, cap: usize, fraction: f64) -> usize {
    cap.min((fraction * n1 as f64).ceil() as usize).max(1)
}

/// Number of match candidates considered per keypoint.
pub fn candidate_count(n2: usize, cap: usize) -> usize {
    cap.min(n2).max(1)
}

/// Rows with the `k` largest row-maximum scores, ties to the lower row
/// index, returned sorted ascending.
pub fn top_k_keypoints(scores: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (n1, n2) = (scores.rows(), scores.cols());
    if k == 0 || k > n1 {
        return Err(Error::Config(format!(
            "top_k_keypoints needs 0 < k <= {n1}, got {k}"
        )));
    }
    let mut ranked: Vec<(f64, usize)> = (0..n1)
        .map(|i| {
            let m = scores.row(i)[..n2]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            (m, i)
        })
        .collect();
    ranked.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// For each keypoint row, the `j` highest-scoring columns in descending
/// score order, ties to the lower column index.
pub fn top_j_candidates(scores: &Tensor, keypoints: &[usize], j: usize) -> Result<Vec<Vec<usize>>> {
    let (n1, n2) = (scores.rows(), scores.cols());
    if j == 0 || j > n2 {
        return Err(Error::Config(format!(
            "top_j_candidates needs 0 < j <= {n2}, got {j}"
        )));
    }
    let mut out = Vec::with_capacity(keypoints.len());
    for &kp in keypoints {
        if kp >= n1 {
            return Err(Error::domain(
                "top_j_candidates",
                format!("keypoint index {kp} out of {n1}"),
            ));
        }
        let row = scores.row(kp);
        let mut ranked: Vec<usize> = (0..n2).collect();
        ranked.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        out.push(ranked[..j].to_vec());
    }
    Ok(out)
}

/// Virtual correspondences for a set of keypoints.
///
/// `weights[i]` aligns with `candidates[i]` and sums to 1; `virtuals[i]` is
/// the weighted average of the candidate coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// Indices into the source cloud, ascending.
    pub keypoints: Vec<usize>,
    /// Per keypoint: candidate indices into the target cloud, in descending
    /// score order.
    pub candidates: Vec<Vec<usize>>,
    /// Per keypoint: convex weights over the candidates.
    pub weights: Vec<Vec<f64>>,
    /// Per keypoint: the virtual corresponding point.
    pub virtuals: Vec<[f64; 3]>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Checks the structural invariants; used by tests and after load.
    pub fn validate(&self) -> Result<()> {
        let k = self.keypoints.len();
        if self.candidates.len() != k || self.weights.len() != k || self.virtuals.len() != k {
            return Err(Error::Contract(format!(
                "correspondence set arity mismatch: {k} keypoints, {} candidate lists, {} weight lists, {} virtuals",
                self.candidates.len(),
                self.weights.len(),
                self.virtuals.len()
            )));
        }
        if self.keypoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(
                "keypoints must be strictly ascending".into(),
            ));
        }
        for i in 0..k {
            if self.candidates[i].is_empty() || self.candidates[i].len() != self.weights[i].len() {
                return Err(Error::Contract(format!(
                    "keypoint {i}: {} candidates but {} weights",
                    self.candidates[i].len(),
                    self.weights[i].len()
                )));
            }
            let sum: f64 = self.weights[i].iter().sum();
            if (sum - 1.0).abs() > 1e-9 || self.weights[i].iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(Error::Contract(format!(
                    "keypoint {i}: weights are not a convex combination (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Plain-text table export: one row per keypoint with its weighted
    /// candidates and virtual point. Stable format, suitable for diffing.
    pub fn to_table_string(&self) -> String {
        let mut s = String::from("keypoint\tcandidates(index:weight)\tvirtual_x\tvirtual_y\tvirtual_z\n");
        for i in 0..self.keypoints.len() {
            let cands: Vec<String> = self.candidates[i]
                .iter()
                .zip(&self.weights[i])
                .map(|(c, w)| format!("{c}:{w}"))
                .collect();
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                self.keypoints[i],
                cands.join(","),
                self.virtuals[i][0],
                self.virtuals[i][1],
                self.virtuals[i][2]
            ));
        }
        s
    }
}

/// Graph handles produced by [`soft_pointer_graph`].
pub struct SoftPointerVars {
    /// `[K, N2]` matching matrix: row-stochastic, zero outside candidates.
    pub matching: Var,
    /// `[K, 3]` virtual corresponding points.
    pub virtuals: Var,
}

/// Differentiable soft pointer. `phi1`/`phi2` are the matching features of
/// the two clouds (`[N1, c]`, `[N2, c]`); scores between a keypoint and its
/// candidates are inner products, normalized per row with a masked softmax.
pub fn soft_pointer_graph(
    g: &mut Graph,
    phi1: Var,
    phi2: Var,
    p2: &PointCloud,
    keypoints: &[usize],
    candidates: &[Vec<usize>],
) -> Result<SoftPointerVars> {
    if keypoints.len() != candidates.len() {
        return Err(Error::Contract(format!(
            "{} keypoints with {} candidate lists",
            keypoints.len(),
            candidates.len()
        )));
    }
    if g.value(phi2).rows() != p2.len() {
        return Err(Error::Dimension {
            op: "soft_pointer",
            lhs: g.value(phi2).shape().to_vec(),
            rhs: vec![p2.len(), 3],
        });
    }
    let keys = g.gather_rows(phi1, keypoints)?;
    let phi2_t = g.transpose(phi2)?;
    let logits = g.matmul(keys, phi2_t)?;
    let matching = g.masked_softmax_rows(logits, candidates)?;
    let coords = g.constant(p2.to_tensor());
    let virtuals = g.attend(matching, coords)?;
    Ok(SoftPointerVars { matching, virtuals })
}

/// Value-level soft pointer producing a [`CorrespondenceSet`].
pub fn soft_pointer(
    phi1: &FeatureMatrix,
    phi2: &FeatureMatrix,
    p2: &PointCloud,
    keypoints: &[usize],
    candidates: &[Vec<usize>],
) -> Result<CorrespondenceSet> {
    let mut g = Graph::new();
    let f1 = g.constant(phi1.clone());
    let f2 = g.constant(phi2.clone());
    let out = soft_pointer_graph(&mut g, f1, f2, p2, keypoints, candidates)?;
    let matching = g.value(out.matching);
    let virt = g.value(out.virtuals);
    let weights: Vec<Vec<f64>> = candidates
        .iter()
        .enumerate()
        .map(|(i, cands)| cands.iter().map(|&c| matching.get2(i, c)).collect())
        .collect();
    let virtuals: Vec<[f64; 3]> = (0..keypoints.len())
        .map(|i| [virt.get2(i, 0), virt.get2(i, 1), virt.get2(i, 2)])
        .collect();
    Ok(CorrespondenceSet {
        keypoints: keypoints.to_vec(),
        candidates: candidates.to_vec(),
        weights,
        virtuals,
    })
}

/// Relative threshold under which the second singular value of the cross
/// covariance is treated as zero (rank < 2: the correspondence geometry is
/// collinear or coincident and the rotation is not identifiable).
const RANK_TOL: f64 = 1e-9;

/// Closed-form rigid fit: finds `R, t` minimizing the mean squared distance
/// `|R x_i + t - y_i|^2` via SVD of the centered cross covariance. The
/// reflection case is corrected by re-weighting the smallest singular
/// direction with `det(V U^T)`, so the result is always a proper rotation.
pub fn solve_svd(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::Dimension {
            op: "solve_svd",
            lhs: vec![source.len(), 3],
            rhs: vec![target.len(), 3],
        });
    }
    let k = source.len();
    if k < 3 {
        return Err(Error::domain(
            "solve_svd",
            format!("need at least 3 correspondences, got {k}"),
        ));
    }
    let mean = |pts: &[[f64; 3]]| -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in pts {
            c += Vector3::new(p[0], p[1], p[2]);
        }
        c / k as f64
    };
    let cx = mean(source);
    let cy = mean(target);
    let mut h = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        let dx = Vector3::new(x[0], x[1], x[2]) - cx;
        let dy = Vector3::new(y[0], y[1], y[2]) - cy;
        h += dx * dy.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (
        svd.u.expect("svd with u requested"),
        svd.v_t.expect("svd with v_t requested"),
    );
    let s = svd.singular_values;
    if s[0] <= 0.0 || s[1] <= RANK_TOL * s[0] {
        let rank = if s[0] <= 0.0 { 0 } else { 1 };
        return Err(Error::DegenerateGeometry(format!(
            "cross covariance has rank {rank}; the rotation is not identifiable \
             (singular values {:.3e}, {:.3e}, {:.3e})",
            s[0], s[1], s[2]
        )));
    }
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation = v * correction * u.transpose();
    let translation = cy - rotation * cx;
    RigidTransform::from_parts(rotation, translation)
}

/// Labels each virtual correspondence true/false against a ground-truth
/// motion: the virtual point is pulled back through the truth and matched to
/// its nearest source point; the label is true when that nearest point is
/// the keypoint itself. Ties break toward the lower index.
pub fn label_matches(
    p1: &PointCloud,
    keypoints: &[usize],
    virtuals: &[[f64; 3]],
    truth: &RigidTransform,
) -> Result<Vec<bool>> {
    if keypoints.len() != virtuals.len() {
        return Err(Error::Contract(format!(
            "{} keypoints with {} virtual points",
            keypoints.len(),
            virtuals.len()
        )));
    }
    let inv = truth.inverse();
    let mut labels = Vec::with_capacity(keypoints.len());
    for (&kp, v) in keypoints.iter().zip(virtuals) {
        if kp >= p1.len() {
            return Err(Error::domain(
                "label_matches",
                format!("keypoint index {kp} out of {}", p1.len()),
            ));
        }
        let back = inv.apply(*v);
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for (i, p) in p1.points().iter().enumerate() {
            let d = (0..3).map(|a| (p[a] - back[a]) * (p[a] - back[a])).sum::<f64>();
            if d < best {
                best = d;
                best_i = i;
            }
        }
        labels.push(best_i == kp);
    }
    Ok(labels)
}
