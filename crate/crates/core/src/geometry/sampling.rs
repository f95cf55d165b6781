//! Deterministic point selection: brute-force k-nearest neighbors,
//! farthest-point sampling and seeded random downsampling.
//!
//! All tie-breaks are by lower index, so results are reproducible and
//! independent of hash or allocation order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// k nearest neighbors per row over arbitrary-dimensional rows.
/// Self-indices are excluded; ties break toward the lower index. Each
/// neighbor list is ordered by ascending (distance, index).
fn knn_generic(rows: &[&[f64]], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = rows.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "knn needs 0 < k < n, got k = {k} with n = {n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scored.clear();
        for j in 0..n {
            if j != i {
                scored.push((sq_dist(rows[i], rows[j]), j));
            }
        }
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(scored[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// k nearest neighbors in Cartesian space.
pub fn knn_indices(points: &[[f64; 3]], k: usize) -> Result<Vec<Vec<usize>>> {
    let rows: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    knn_generic(&rows, k)
}

/// k nearest neighbors between the rows of a feature matrix.
pub fn knn_rows(features: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    if features.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "knn_rows",
            lhs: features.shape().to_vec(),
            rhs: vec![],
        });
    }
    let n = features.rows();
    let rows: Vec<&[f64]> = (0..n).map(|i| features.row(i)).collect();
    knn_generic(&rows, k)
}

/// Greedy farthest-point sampling: starts at `start`, then repeatedly picks
/// the point maximizing the distance to the chosen set (ties to the lower
/// index). Returns `k` distinct indices in selection order.
pub fn farthest_point_indices(points: &[[f64; 3]], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "farthest point sampling needs 0 < k <= n, got k = {k} with n = {n}"
        )));
    }
    if start >= n {
        return Err(Error::Config(format!(
            "farthest point start index {start} out of {n}"
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[start]))
        .collect();
    chosen.push(start);
    while chosen.len() < k {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best {
                best = d;
                best_i = i;
            }
        }
        chosen.push(best_i);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = sq_dist(&points[i], &points[best_i]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// `count` distinct indices drawn without replacement, in draw order.
/// `count == n` yields a full random permutation.
pub fn downsample_indices(n: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count == 0 || count > n {
        return Err(Error::Config(format!(
            "downsample needs 0 < count <= n, got count = {count} with n = {n}"
        )));
    }
    Ok(rand::seq::index::sample(rng, n, count).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_on_a_line_picks_adjacent_points() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let nn = knn_indices(&pts, 2).unwrap();
        assert_eq!(nn[0], vec![1, 2]);
        assert_eq!(nn[2], vec![1, 3]); // tie at distance 1: lower index first
        assert_eq!(nn[4], vec![3, 2]);
    }

    #[test]
    fn knn_excludes_self_even_with_duplicates() {
        let pts = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let nn = knn_indices(&pts, 1).unwrap();
        assert_eq!(nn[0], vec![1]); // the duplicate, not itself
        assert_eq!(nn[1], vec![0]);
    }

    #[test]
    fn knn_rejects_k_out_of_range() {
        let pts = vec![[0.0; 3]; 4];
        assert!(knn_indices(&pts, 0).is_err());
        assert!(knn_indices(&pts, 4).is_err());
    }

    #[test]
    fn fps_from_a_corner_selects_all_square_corners() {
        // four unit-square corners plus the center; greedy from any corner
        // must select exactly the corners
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ];
        let mut got = farthest_point_indices(&pts, 4, 0).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_indices_are_distinct_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let got = farthest_point_indices(&pts, 20, 0).unwrap();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(sorted.iter().all(|&i| i < 50));
    }

    #[test]
    fn downsample_full_count_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = downsample_indices(10, 10, &mut rng).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(idx, (0..10).collect::<Vec<_>>()); // seed 5 shuffles
    }

    #[test]
    fn downsample_is_seed_deterministic() {
        let a = downsample_indices(100, 30, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = downsample_indices(100, 30, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }
}
