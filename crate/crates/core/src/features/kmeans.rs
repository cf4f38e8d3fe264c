//! Weighted Lloyd's k-means with k-means++ seeding from a fixed RNG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Clustering {
    pub centroids: Vec<[f64; 3]>,
    /// Total point weight per cluster.
    pub weights: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Clusters weighted points into at most `k` groups. Fewer clusters are
/// produced when there are fewer distinct points than `k`.
pub fn kmeans(points: &[[f64; 3]], weights: &[f64], k: usize, seed: u64, max_iter: usize) -> Clustering {
    assert_eq!(points.len(), weights.len());
    assert!(!points.is_empty() && k >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = weights.iter().sum();

    let mut centroids = Vec::with_capacity(k);
    let first = pick(&mut rng, weights, total);
    centroids.push(points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let mass: f64 = scores.iter().sum();
        if mass <= 0.0 {
            break;
        }
        let c = points[pick(&mut rng, &scores, mass)];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }

    let mut assign = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; 3]; centroids.len()];
        let mut mass = vec![0.0; centroids.len()];
        for ((p, w), &a) in points.iter().zip(weights).zip(&assign) {
            for d in 0..3 {
                sums[a][d] += w * p[d];
            }
            mass[a] += w;
        }
        for (c, (s, m)) in centroids.iter_mut().zip(sums.iter().zip(&mass)) {
            if *m > 0.0 {
                *c = [s[0] / m, s[1] / m, s[2] / m];
            }
        }
    }

    let mut cluster_weights = vec![0.0; centroids.len()];
    for (w, &a) in weights.iter().zip(&assign) {
        cluster_weights[a] += w;
    }
    Clustering {
        centroids,
        weights: cluster_weights,
        iterations,
    }
}

fn pick(rng: &mut ChaCha8Rng, scores: &[f64], total: f64) -> usize {
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, s) in scores.iter().enumerate() {
        acc += s;
        if acc > target && *s > 0.0 {
            return i;
        }
    }
    scores.iter().rposition(|&s| s > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_point_masses() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let c = kmeans(&pts, &[7.0, 3.0], 2, 1, 100);
        let mut ws = c.weights.clone();
        ws.sort_by(f64::total_cmp);
        assert_eq!(ws, vec![3.0, 7.0]);
    }

    #[test]
    fn identical_points_yield_single_cluster() {
        let pts = [[0.3, 0.2, 0.1]];
        let c = kmeans(&pts, &[50.0], 5, 7, 100);
        assert_eq!(c.centroids, vec![[0.3, 0.2, 0.1]]);
    }

    #[test]
    fn deterministic_for_seed() {
        let pts: Vec<[f64; 3]> = (0..40).map(|i| [(i % 7) as f64, (i % 3) as f64, i as f64 / 40.0]).collect();
        let w = vec![1.0; 40];
        let a = kmeans(&pts, &w, 4, 11, 100);
        let b = kmeans(&pts, &w, 4, 11, 100);
        assert_eq!(a.centroids, b.centroids);
    }
}
