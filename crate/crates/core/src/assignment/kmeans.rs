use rand::seq::index;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::math::{rng, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with `k` distinct data points drawn uniformly as
/// initial centers. A cluster that empties out is re-seeded with the point
/// currently farthest from its own center.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = points.rows();
    if k < 1 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} points")));
    }
    let dim = points.cols();
    let mut rng = rng(seed);
    let mut centroids = Matrix::zeros(k, dim);
    for (c, i) in index::sample(&mut rng, n, k).into_iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }

    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut iterations = 0;
    for _ in 0..iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            changed |= labels[i] != c;
            labels[i] = c;
            dists[i] = d;
        }
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in empty {
            // Farthest point whose cluster can spare it; ties to lowest index.
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            let Some(far) = far else { break };
            counts[labels[far]] -= 1;
            labels[far] = c;
            counts[c] = 1;
            dists[far] = 0.0;
            centroids.row_mut(c).copy_from_slice(points.row(far));
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(labels[i])))
        .sum();
    Ok(KMeans {
        labels,
        centroids,
        iterations,
        inertia,
    })
}

/// Cluster id per narration row, used as a baseline label space.
pub fn kmeans_asr_labels(
    narr_table: &EmbeddingTable,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    Ok(kmeans(&narr_table.to_matrix(), k, iters, seed)?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n_per: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut r = rng(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let centers = [[-5.0, -5.0, 0.0], [5.0, 5.0, 0.0]];
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..2 * n_per {
            let b = i % 2;
            rows.push(
                centers[b]
                    .iter()
                    .map(|c| c + noise.sample(&mut r))
                    .collect::<Vec<_>>(),
            );
            truth.push(b);
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    /// Best agreement over all relabelings; exhaustive matching is exact for
    /// tiny k.
    fn matched_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
        let perms = [[0usize, 1], [1, 0]];
        perms
            .iter()
            .map(|p| pred.iter().zip(truth).filter(|(a, b)| p[**a] == **b).count())
            .max()
            .unwrap() as f64
            / truth.len() as f64
    }

    #[test]
    fn separated_blobs_recovered() {
        let (m, truth) = blobs(100, 3);
        for seed in 0..5 {
            let km = kmeans(&m, 2, 50, seed).unwrap();
            assert_eq!(matched_accuracy(&km.labels, &truth), 1.0);
        }
    }

    #[test]
    fn k_one_is_single_cluster() {
        let (m, _) = blobs(10, 1);
        let km = kmeans(&m, 1, 10, 0).unwrap();
        assert!(km.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn deterministic_for_seed() {
        let (m, _) = blobs(30, 2);
        assert_eq!(kmeans(&m, 4, 20, 9).unwrap(), kmeans(&m, 4, 20, 9).unwrap());
    }

    #[test]
    fn invalid_k() {
        let (m, _) = blobs(2, 2);
        assert!(kmeans(&m, 0, 10, 0).is_err());
        assert!(kmeans(&m, 5, 10, 0).is_err());
    }

    #[test]
    fn duplicate_points_never_leave_clusters_empty() {
        let m = Matrix::from_rows(&[[0.0], [0.0], [0.0], [1.0]]).unwrap();
        let km = kmeans(&m, 3, 10, 4).unwrap();
        let mut used = km.labels.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used, vec![0, 1, 2]);
    }
}
