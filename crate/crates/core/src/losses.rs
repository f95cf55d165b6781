//! Training and evaluation losses.
//!
//! Each loss exists twice: a plain value-level function (used for metrics,
//! logging, and as an independent oracle in tests) and a graph builder used
//! during training. The transformation loss is evaluation-only — it is never
//! differentiated and never trained against.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::numeric::{Graph, Tensor, Var};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1e-4;
pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_L1_WEIGHT: f64 = 1e-4;

/// Correspondence loss: virtual points are pulled back through the
/// ground-truth motion and compared to their keypoints. True matches and
/// mismatches are averaged separately; the mismatch term is scaled by
/// `gamma`. A side with zero members contributes nothing (no 0/0).
pub fn correspondence_loss(
    keys: &[[f64; 3]],
    virtuals: &[[f64; 3]],
    labels: &[bool],
    truth: &RigidTransform,
    gamma: f64,
) -> Result<f64> {
    if keys.len() != virtuals.len() || keys.len() != labels.len() {
        return Err(Error::Contract(format!(
            "correspondence_loss arity mismatch: {} keys, {} virtuals, {} labels",
            keys.len(),
            virtuals.len(),
            labels.len()
        )));
    }
    if keys.is_empty() {
        return Err(Error::Contract("correspondence_loss needs at least one pair".into()));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be non-negative: {gamma}")));
    }
    let inv = truth.inverse();
    let (mut sum_cor, mut n_cor) = (0.0, 0usize);
    let (mut sum_mis, mut n_mis) = (0.0, 0usize);
    for ((k, v), &is_true) in keys.iter().zip(virtuals).zip(labels) {
        let back = inv.apply(*v);
        let d = ((k[0] - back[0]).powi(2) + (k[1] - back[1]).powi(2) + (k[2] - back[2]).powi(2))
            .sqrt();
        if is_true {
            sum_cor += d;
            n_cor += 1;
        } else {
            sum_mis += d;
            n_mis += 1;
        }
    }
    let mut loss = 0.0;
    if n_cor > 0 {
        loss += sum_cor / n_cor as f64;
    }
    if n_mis > 0 {
        loss += gamma * sum_mis / n_mis as f64;
    }
    Ok(loss)
}

/// Graph form of [`correspondence_loss`], differentiable in the virtual
/// points. `virtuals` is a `[K, 3]` var; keys/labels/truth are constants.
pub fn correspondence_loss_graph(
    g: &mut Graph,
    virtuals: Var,
    keys: &[[f64; 3]],
    labels: &[bool],
    truth: &RigidTransform,
    gamma: f64,
) -> Result<Var> {
    let k = keys.len();
    if g.value(virtuals).shape() != [k, 3] || labels.len() != k {
        return Err(Error::Contract(format!(
            "correspondence_loss_graph arity mismatch: {:?} virtuals, {k} keys, {} labels",
            g.value(virtuals).shape(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Contract("correspondence_loss needs at least one pair".into()));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be non-negative: {gamma}")));
    }
    // pull back: rows (v - t) * R  ==  (R^T (v - t))^T
    let inv_t = truth.translation;
    let t_row = g.constant(Tensor::matrix(1, 3, vec![inv_t.x, inv_t.y, inv_t.z]).unwrap());
    let centered = g.sub_row(virtuals, t_row)?;
    let r = truth.rotation;
    let r_rowmajor = Tensor::matrix(
        3,
        3,
        vec![
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ],
    )
    .unwrap();
    let r_const = g.constant(r_rowmajor);
    let back = g.matmul(centered, r_const)?;
    let key_rows: Vec<f64> = keys.iter().flatten().copied().collect();
    let keys_const = g.constant(Tensor::matrix(k, 3, key_rows).unwrap());
    let diff = g.sub(back, keys_const)?;
    let dists = g.row_norm(diff)?;

    let n_cor = labels.iter().filter(|&&l| l).count();
    let n_mis = k - n_cor;
    let mut total: Option<Var> = None;
    for (want_true, count, weight) in [
        (true, n_cor, 1.0),
        (false, n_mis, gamma),
    ] {
        if count == 0 {
            continue;
        }
        let mask: Vec<f64> = labels
            .iter()
            .map(|&l| if l == want_true { 1.0 } else { 0.0 })
            .collect();
        let mask_const = g.constant(Tensor::matrix(k, 1, mask).unwrap());
        let picked = g.mul(dists, mask_const)?;
        let summed = g.sum_all(picked)?;
        let term = g.scale(summed, weight / count as f64)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("k >= 1 guarantees at least one term"))
}

/// Transformation loss (evaluation only): `|R_est R_truth^T - I|_F^2 +
/// |t_est - t_truth|^2`. Zero exactly when the motions agree.
pub fn transformation_loss(estimate: &RigidTransform, truth: &RigidTransform) -> f64 {
    let r = estimate.rotation * truth.rotation.transpose() - Matrix3::identity();
    let dt = estimate.translation - truth.translation;
    r.norm_squared() + dt.norm_squared()
}

/// Combined training objective: `alpha * correspondence + beta * l2_sum`
/// where `l2_sum` is the sum of squared parameter entries.
pub fn combined_loss(correspondence: f64, l2_sum: f64, alpha: f64, beta: f64) -> f64 {
    alpha * correspondence + beta * l2_sum
}

/// Graph form of the combined objective.
pub fn combined_loss_graph(
    g: &mut Graph,
    correspondence: Var,
    params: &[Var],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let weighted_cor = g.scale(correspondence, alpha)?;
    if beta == 0.0 || params.is_empty() {
        return Ok(weighted_cor);
    }
    let l2 = l2_penalty_graph(g, params)?;
    let weighted_l2 = g.scale(l2, beta)?;
    g.add(weighted_cor, weighted_l2)
}

/// Sum of squared entries across parameter vars.
pub fn l2_penalty_graph(g: &mut Graph, params: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in params {
        let sq = g.mul(p, p)?;
        let s = g.sum_all(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Contract("l2 penalty over an empty parameter list".into()))
}

/// Sum of absolute entries across parameter vars.
pub fn l1_penalty_graph(g: &mut Graph, params: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in params {
        let a = g.abs(p)?;
        let s = g.sum_all(a)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Contract("l1 penalty over an empty parameter list".into()))
}

/// Triplet hinge on squared distances:
/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::Dimension {
            op: "triplet_loss",
            lhs: vec![anchor.len()],
            rhs: vec![positive.len(), negative.len()],
        });
    }
    let dp: f64 = anchor
        .iter()
        .zip(positive)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    let dn: f64 = anchor
        .iter()
        .zip(negative)
        .map(|(a, n)| (a - n) * (a - n))
        .sum();
    Ok((dp - dn + margin).max(0.0))
}

/// Mean triplet hinge over a batch: `anchors`, `positives`, `negatives` are
/// `[k, c]` vars with aligned rows.
pub fn triplet_loss_graph(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    negatives: Var,
    margin: f64,
) -> Result<Var> {
    let k = g.value(anchors).rows();
    let dp = g.sub(anchors, positives)?;
    let dp2 = g.mul(dp, dp)?;
    let sp = g.row_sums(dp2)?;
    let dn = g.sub(anchors, negatives)?;
    let dn2 = g.mul(dn, dn)?;
    let sn = g.row_sums(dn2)?;
    let diff = g.sub(sp, sn)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    let total = g.sum_all(hinge)?;
    g.scale(total, 1.0 / k as f64)
}
