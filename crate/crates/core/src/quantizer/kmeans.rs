//! k-means++ seeding and Lloyd iterations.

use rand::Rng;

use crate::linalg::{sq_dist, Matrix};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
    pub iterations: usize,
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// center (fewer distinct points than `k`) the next center is drawn uniformly,
/// so duplicate centroids are possible.
pub fn kmeans_pp_init<R: Rng>(data: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    if n == 0 || k == 0 {
        return centroids;
    }
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut best: Vec<f64> = data.iter_rows().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in best.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (b, r) in best.iter_mut().zip(data.iter_rows()) {
            *b = b.min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

/// Index of the nearest centroid for every row; ties go to the lower index.
pub fn assign_nearest(data: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let assignments = data
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cr) in centroids.iter_rows().enumerate() {
                let d = sq_dist(r, cr);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            sse += best_d;
            best
        })
        .collect();
    (assignments, sse)
}

/// Lloyd iterations from `init`. Empty clusters keep their previous centroid.
/// Stops early once assignments repeat; the returned assignments are always
/// computed against the returned centroids.
pub fn lloyd(data: &Matrix, init: Matrix, max_iters: usize) -> KMeansResult {
    let mut centroids = init;
    let (mut assignments, mut sse) = assign_nearest(data, &centroids);
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = Matrix::zeros(centroids.rows(), centroids.cols());
        let mut counts = vec![0usize; centroids.rows()];
        for (r, &a) in data.iter_rows().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(r) {
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
        let (next, next_sse) = assign_nearest(data, &centroids);
        sse = next_sse;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    KMeansResult {
        centroids,
        assignments,
        sse,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_equals_n_recovers_points() {
        let data = Matrix::from_vec(4, 2, vec![0., 0., 5., 5., -3., 1., 9., -9.]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = kmeans_pp_init(&data, 4, &mut rng);
        let res = lloyd(&data, init, 10);
        assert_eq!(res.sse, 0.0);
        let mut a = res.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn more_centroids_than_points_duplicates() {
        let data = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = kmeans_pp_init(&data, 5, &mut rng);
        assert_eq!(init.rows(), 5);
        assert!(init.as_slice().iter().all(|v| *v == 1.0 || *v == 2.0));
    }
}
