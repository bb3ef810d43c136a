//! Synthetic classifier outputs with known labels.
//!
//! Each sample draws its label from the prior, then logits
//! `z_j = signal * [j == y] + N(0, noise_sigma^2)` and probabilities
//! `softmax(z / temperature)`. Every sample has its own RNG stream derived
//! from `(seed, index)`, so output never depends on generation order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{softmax_into, ProbabilityDataset, Subset};
use crate::error::{Error, Result};
use crate::rng;
use crate::unlabeled::pseudo_label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub n_samples: usize,
    /// Logit boost of the true class.
    pub signal: f64,
    pub noise_sigma: f64,
    pub temperature: f64,
    /// Class prior; uniform when empty.
    pub prior: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            n_samples: 10_000,
            signal: 3.0,
            noise_sigma: 1.0,
            temperature: 1.0,
            prior: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::input("synthetic data needs at least 2 classes"));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return Err(Error::input("signal must be a nonnegative number"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::input("noise_sigma must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::input("temperature must be positive"));
        }
        if !self.prior.is_empty() {
            if self.prior.len() != self.num_classes {
                return Err(Error::input(format!(
                    "prior has {} entries for {} classes",
                    self.prior.len(),
                    self.num_classes
                )));
            }
            if self.prior.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::input("prior entries must be nonnegative"));
            }
            let sum: f64 = self.prior.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!("prior sums to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    fn cumulative_prior(&self) -> Vec<f64> {
        let k = self.num_classes;
        let mut acc = 0.0;
        let mut cum: Vec<f64> = (0..k)
            .map(|j| {
                acc += if self.prior.is_empty() { 1.0 / k as f64 } else { self.prior[j] };
                acc
            })
            .collect();
        cum[k - 1] = 1.0;
        cum
    }
}

fn sample_row(cfg: &SyntheticConfig, cum_prior: &[f64], index: usize, logits: &mut [f64]) -> usize {
    let mut rng = rng::stream(cfg.seed, index as u64);
    let r: f64 = rng.random();
    let y = cum_prior.partition_point(|&c| c <= r).min(cfg.num_classes - 1);
    for (j, z) in logits.iter_mut().enumerate() {
        let noise: f64 = StandardNormal.sample(&mut rng);
        *z = cfg.noise_sigma * noise + if j == y { cfg.signal } else { 0.0 };
    }
    y
}

/// Generate a labeled dataset. Logits are kept and also serve as features.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<ProbabilityDataset> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let cum = cfg.cumulative_prior();
    let mut logits = vec![0.0; cfg.n_samples * k];
    let mut probs = vec![0.0; cfg.n_samples * k];
    let mut labels = vec![None; cfg.n_samples];
    logits
        .par_chunks_mut(k)
        .zip(probs.par_chunks_mut(k))
        .zip(labels.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((z, p), label))| {
            *label = Some(sample_row(cfg, &cum, i, z));
            softmax_into(z, cfg.temperature, p);
        });
    let features = logits.clone();
    ProbabilityDataset::new(k, probs, labels)?
        .with_logits(logits)?
        .with_features(k, features)
}

/// Fraction of labeled samples whose pseudo-label is the true label.
pub fn measure_top1_accuracy(data: Subset<'_>) -> f64 {
    let mut labeled = 0usize;
    let mut correct = 0usize;
    for i in 0..data.len() {
        if let Some(y) = data.label(i) {
            labeled += 1;
            if pseudo_label(data.probs(i)) == y {
                correct += 1;
            }
        }
    }
    if labeled == 0 {
        return 0.0;
    }
    correct as f64 / labeled as f64
}

/// Top-1 accuracy of `n` samples from `cfg`, without materializing them.
fn probe_accuracy(cfg: &SyntheticConfig, n: usize) -> f64 {
    let k = cfg.num_classes;
    let cum = cfg.cumulative_prior();
    let correct: usize = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; k],
            |z, i| {
                let y = sample_row(cfg, &cum, i, z);
                // Softmax is monotone, so the argmax of the logits is the pseudo-label.
                let mut best = 0;
                for j in 1..k {
                    if z[j] > z[best] {
                        best = j;
                    }
                }
                usize::from(best == y)
            },
        )
        .sum();
    correct as f64 / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SignalCalibration {
    pub signal: f64,
    pub achieved_accuracy: f64,
    pub iterations: usize,
}

impl SignalCalibration {
    pub const PROBE_SAMPLES: usize = 50_000;
    pub const MAX_ITERATIONS: usize = 60;
    pub const SIGNAL_RANGE: (f64, f64) = (0.0, 50.0);
    pub const DEFAULT_TOLERANCE: f64 = 0.01;
}

/// Bisect the signal so the template's top-1 accuracy hits `target`.
///
/// The probe reuses the template's seed, so the result is reproducible and
/// monotone in the target.
pub fn calibrate_signal_for_accuracy(target: f64, template: &SyntheticConfig, tolerance: f64) -> Result<SignalCalibration> {
    template.validate()?;
    let k = template.num_classes as f64;
    if !(target > 1.0 / k && target < 1.0) {
        return Err(Error::input(format!(
            "target accuracy {target} must lie strictly between 1/K = {} and 1",
            1.0 / k
        )));
    }
    if !(tolerance > 0.0) {
        return Err(Error::input("tolerance must be positive"));
    }
    let probe = |signal: f64| {
        let cfg = SyntheticConfig {
            signal,
            ..template.clone()
        };
        probe_accuracy(&cfg, SignalCalibration::PROBE_SAMPLES)
    };
    let (mut lo, mut hi) = SignalCalibration::SIGNAL_RANGE;
    let mut best = (f64::NAN, f64::NAN);
    for it in 1..=SignalCalibration::MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let acc = probe(mid);
        if best.1.is_nan() || (acc - target).abs() < (best.1 - target).abs() {
            best = (mid, acc);
        }
        if (acc - target).abs() <= tolerance {
            return Ok(SignalCalibration {
                signal: mid,
                achieved_accuracy: acc,
                iterations: it,
            });
        }
        if acc < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence {
        iterations: SignalCalibration::MAX_ITERATIONS,
        best: best.1,
    })
}
