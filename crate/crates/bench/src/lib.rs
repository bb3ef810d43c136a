//! Shared fixtures for the benchmarks.

use rand::Rng;
use semicp::{rng, ProbabilityDataset};

/// `rows` random probability vectors over `k` classes, labeled when asked.
pub fn random_dataset(rows: usize, k: usize, labeled: bool, seed: u64) -> ProbabilityDataset {
    let mut r = rng::stream(seed, 0);
    let mut probs = Vec::with_capacity(rows * k);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: Vec<f64> = (0..k).map(|_| -r.random::<f64>().ln()).collect();
        let sum: f64 = row.iter().sum();
        probs.extend(row.iter().map(|x| x / sum));
        labels.push(labeled.then(|| r.random_range(0..k)));
    }
    ProbabilityDataset::new(k, probs, labels).expect("valid fixture")
}

/// Uniform scores in [0, 1).
pub fn random_scores(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 1);
    (0..len).map(|_| r.random()).collect()
}
