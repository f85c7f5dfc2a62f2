//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Tensor,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step, plus the final one.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lowest index) and the total cost.
pub fn assign(points: &Tensor, centroids: &Tensor) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assignment = (0..points.rows())
        .map(|i| {
            let p = points.row_slice(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.rows() {
                let d = sq_dist(p, centroids.row_slice(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            total += best.1;
            best.0
        })
        .collect();
    (assignment, total)
}

pub fn kmeans(points: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KMeans, NumericsError> {
    let (n, d) = (points.rows(), points.cols());
    if k == 0 || k > n {
        return Err(NumericsError::InvalidArgument(format!("k-means with k={k} on {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Tensor::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_slice_mut(0).copy_from_slice(points.row_slice(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row_slice(i), points.row_slice(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_slice_mut(c).copy_from_slice(points.row_slice(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points.row_slice(i), points.row_slice(pick)));
        }
    }

    let mut objective = Vec::with_capacity(iters + 1);
    let mut assignment = Vec::new();
    for _ in 0..iters {
        let (a, cost) = assign(points, &centroids);
        objective.push(cost);
        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in a.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums.row_slice_mut(c).iter_mut().zip(points.row_slice(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // An empty cluster keeps its centroid.
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_slice_mut(c).iter_mut().zip(sums.row_slice(c)) {
                    *dst = s * inv;
                }
            }
        }
        let unchanged = a == assignment;
        assignment = a;
        if unchanged {
            break;
        }
    }
    let (final_assignment, cost) = assign(points, &centroids);
    objective.push(cost);
    Ok(KMeans { centroids, assignment: final_assignment, objective })
}
