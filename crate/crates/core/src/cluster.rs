//! Small deterministic k-means used for ClusterCP and feature groups.

use rand::Rng;

use crate::rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Lloyd's algorithm with farthest-point seeding.
///
/// The first center is drawn from `seed`; each further center is the point
/// farthest from all chosen centers (lowest index on ties). Returns the
/// cluster of each point. `k` is clamped to `1..=points.len()`.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let first = rng::stream(seed, rng::purpose::CLUSTER).random_range(0..n);
    let mut centers = vec![points[first].clone()];
    let mut min_dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let mut far = (0, -1.0);
        for (i, &d) in min_dist.iter().enumerate() {
            if d > far.1 {
                far = (i, d);
            }
        }
        let c = points[far.0].clone();
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                for (dst, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

/// Cluster centers for `assignment`, for assigning new points later.
pub fn centers(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

pub fn assign(point: &[f64], centers: &[Vec<f64>]) -> usize {
    nearest(point, centers)
}
