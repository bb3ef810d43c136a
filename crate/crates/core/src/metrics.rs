//! Evaluation metrics and the statistical helpers behind them.
//!
//! Gap metrics are reported on the x100 percentage scale. Aggregations sum
//! in index order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::calibration::PredictionSet;
use crate::error::{Error, Result};

/// Number of uniform bins in the coverage histogram on `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 50;

/// Observations from one trial of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: String,
    pub trial: usize,
    pub seed: u64,
    pub coverage: f64,
    pub avg_size: f64,
    /// Coverage within each group (or class); `None` when the group had no
    /// test samples in this trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_group_coverage: Option<Vec<Option<f64>>>,
    /// Coverage-bias diagnostic of the SemiCP threshold, when computable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// Aggregates of one method over all trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub trials: usize,
    pub mean_coverage: f64,
    pub cov_gap: f64,
    pub over_cov_gap: f64,
    pub under_cov_gap: f64,
    pub mean_avg_size: f64,
    pub histogram: Vec<u64>,
    /// Mean over trials of the per-trial group coverage gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_cov_gap: Option<f64>,
    /// Mean coverage of each group over the trials in which it appeared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_coverage: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_epsilon: Option<f64>,
}

impl MetricsSummary {
    pub fn from_trials(trials: &[TrialResult], alpha: f64) -> Self {
        let coverages: Vec<f64> = trials.iter().map(|t| t.coverage).collect();
        let sizes: Vec<f64> = trials.iter().map(|t| t.avg_size).collect();
        let (over, under) = over_under_gaps(&coverages, alpha);

        let group_coverage = trials.first().and_then(|t| t.per_group_coverage.as_ref()).map(|first| {
            let g = first.len();
            let mut sums = vec![0.0; g];
            let mut counts = vec![0usize; g];
            for t in trials {
                if let Some(per) = &t.per_group_coverage {
                    for (i, c) in per.iter().enumerate().take(g) {
                        if let Some(c) = c {
                            sums[i] += c;
                            counts[i] += 1;
                        }
                    }
                }
            }
            sums.iter()
                .zip(&counts)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect::<Vec<_>>()
        });
        let group_gaps: Vec<f64> = trials
            .iter()
            .filter_map(|t| t.per_group_coverage.as_ref())
            .map(|per| {
                let seen: Vec<f64> = per.iter().flatten().copied().collect();
                class_cov_gap(&seen, alpha)
            })
            .collect();
        let epsilons: Vec<f64> = trials.iter().filter_map(|t| t.epsilon).collect();

        Self {
            trials: trials.len(),
            mean_coverage: mean(&coverages),
            cov_gap: cov_gap(&coverages, alpha),
            over_cov_gap: over,
            under_cov_gap: under,
            mean_avg_size: mean(&sizes),
            histogram: histogram(&coverages),
            group_cov_gap: group_coverage.as_ref().map(|_| mean(&group_gaps)),
            group_coverage,
            mean_epsilon: (!epsilons.is_empty()).then(|| mean(&epsilons)),
        }
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fraction of prediction sets containing their true label.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    hits as f64 / sets.len() as f64
}

pub fn avg_size(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64
}

/// `100 * mean_i |c_i - (1 - alpha)|`.
pub fn cov_gap(coverages: &[f64], alpha: f64) -> f64 {
    100.0 * mean(&coverages.iter().map(|c| (c - (1.0 - alpha)).abs()).collect::<Vec<_>>())
}

/// Over- and under-coverage parts of [`cov_gap`]; they sum to it.
pub fn over_under_gaps(coverages: &[f64], alpha: f64) -> (f64, f64) {
    let target = 1.0 - alpha;
    let over: Vec<f64> = coverages
        .iter()
        .map(|&c| if c > target { c - target } else { 0.0 })
        .collect();
    let under: Vec<f64> = coverages
        .iter()
        .map(|&c| if c < target { target - c } else { 0.0 })
        .collect();
    (100.0 * mean(&over), 100.0 * mean(&under))
}

/// `100 * mean_y |c_y - (1 - alpha)|` over per-class coverages.
pub fn class_cov_gap(class_coverages: &[f64], alpha: f64) -> f64 {
    cov_gap(class_coverages, alpha)
}

/// Share of the Standard-to-Oracle gap closed by SemiCP, in percent.
/// `None` when Standard and Oracle coincide.
pub fn improvement(standard: f64, semicp: f64, oracle: f64) -> Option<f64> {
    let denom = standard - oracle;
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some(100.0 * (standard - semicp) / denom)
}

/// Counts of coverages in [`HISTOGRAM_BINS`] equal bins on `[0, 1]`.
pub fn histogram(coverages: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for &c in coverages {
        let i = ((c * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1;
    }
    bins
}

/// `#{s <= t} / |sample|`.
pub fn empirical_cdf(sample: &[f64], t: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    sample.iter().filter(|&&s| s <= t).count() as f64 / sample.len() as f64
}

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_t |F_a(t) - F_b(t)|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { 1.0 };
    }
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    // One sample is exhausted; the remaining jumps only shrink the gap.
    sup
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(sample);
    let n = s.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        sup = sup.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    sup
}

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`, the CDF of
/// `Beta(a, b)` at `x`.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::input(format!("beta_cdf: x = {x} outside [0, 1]")));
    }
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::input(format!("beta_cdf: shape parameters must be positive (a = {a}, b = {b})")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast on the side of the mean nearer x.
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    };
    Ok(value.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sets(v: &[&[usize]]) -> Vec<PredictionSet> {
        v.iter().map(|s| PredictionSet(s.to_vec())).collect()
    }

    #[test]
    fn coverage_and_size() {
        let s = sets(&[&[0], &[1], &[2], &[0, 1]]);
        assert_eq!(coverage(&s, &[0, 1, 2, 1]), 1.0);
        assert_eq!(coverage(&s, &[0, 1, 2, 2]), 0.75);
        assert_eq!(coverage(&sets(&[&[], &[]]), &[0, 1]), 0.0);
        assert_eq!(avg_size(&sets(&[&[0], &[1]])), 1.0);
        assert_eq!(avg_size(&sets(&[&[0, 1, 2], &[0, 1, 2]])), 3.0);
        assert_eq!(avg_size(&sets(&[&[0], &[0, 1], &[0, 1, 2]])), 2.0);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(cov_gap(&[0.9, 0.9], 0.1), 0.0);
        assert!((cov_gap(&[0.85, 0.95], 0.1) - 5.0).abs() < 1e-12);
        let (o, u) = over_under_gaps(&[0.85, 0.95], 0.1);
        assert!((o - 2.5).abs() < 1e-12 && (u - 2.5).abs() < 1e-12);
        let (_, u) = over_under_gaps(&[0.95, 0.99], 0.1);
        assert_eq!(u, 0.0);
        assert!((class_cov_gap(&[0.8, 1.0], 0.1) - 10.0).abs() < 1e-12);
        assert_eq!(class_cov_gap(&[0.9, 0.9, 0.9], 0.1), 0.0);
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement(2.0, 1.0, 1.0), Some(100.0));
        assert_eq!(improvement(2.0, 2.0, 1.0), Some(0.0));
        assert_eq!(improvement(1.0, 0.5, 1.0), None);
        let v = improvement(2.64, 0.88, 0.65).unwrap();
        assert!((v - 88.44).abs() < 0.01, "{v}");
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 0.01, 0.5, 0.999, 1.0]);
        assert_eq!(h.len(), HISTOGRAM_BINS);
        assert_eq!(h[0], 2);
        assert_eq!(h[25], 1);
        assert_eq!(h[49], 2);
    }

    #[test]
    fn summary_of_one_trial() {
        let t = TrialResult {
            method: "standard".into(),
            trial: 0,
            seed: 1,
            coverage: 0.87,
            avg_size: 1.5,
            per_group_coverage: Some(vec![Some(0.8), None]),
            epsilon: None,
        };
        let s = MetricsSummary::from_trials(std::slice::from_ref(&t), 0.1);
        assert_eq!(s.trials, 1);
        assert_eq!(s.mean_coverage, 0.87);
        assert_eq!(s.mean_avg_size, 1.5);
        assert!((s.cov_gap - 3.0).abs() < 1e-9);
        assert!((s.under_cov_gap - 3.0).abs() < 1e-9);
        assert_eq!(s.group_coverage, Some(vec![Some(0.8), None]));
        assert!((s.group_cov_gap.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(s.mean_epsilon, None);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_distance(&[0.1, 0.5, 0.5], &[0.5, 0.1, 0.5]), 0.0);
        assert_eq!(ks_distance(&[0.0], &[1.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0], &[2.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn beta_cdf_examples() {
        let v = beta_cdf(0.8, 10.0, 1.0).unwrap();
        assert!((v - 0.8f64.powi(10)).abs() < 1e-12);
        assert!((v - 0.10737).abs() < 1e-5);
        for x in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((beta_cdf(x, 1.0, 1.0).unwrap() - x).abs() < 1e-12);
        }
        assert!((beta_cdf(0.5, 2.0, 2.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(beta_cdf(1.1, 1.0, 1.0).is_err());
        assert!(beta_cdf(0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn beta_cdf_agrees_with_statrs() {
        use statrs::distribution::{Beta, ContinuousCDF};
        for &(a, b) in &[(10.0, 1.0), (46.0, 5.0), (0.5, 0.5), (3.0, 7.5), (900.0, 101.0), (19.0, 2.0)] {
            let d = Beta::new(a, b).unwrap();
            for i in 1..100 {
                let x = i as f64 / 100.0;
                let ours = beta_cdf(x, a, b).unwrap();
                assert!((ours - d.cdf(x)).abs() < 1e-10, "a={a} b={b} x={x}: {ours} vs {}", d.cdf(x));
            }
        }
    }

    #[test]
    fn beta_moments_by_quadrature() {
        // mean = int (1 - F), E[X^2] = int 2x (1 - F), Simpson on [0, 1].
        for n in [10usize, 20, 50] {
            let l = crate::calibration::conformal_level(n, 0.1) as f64;
            let (a, b) = (l, n as f64 + 1.0 - l);
            let steps = 20_000;
            let h = 1.0 / steps as f64;
            let (mut m1, mut m2) = (0.0, 0.0);
            for i in 0..=steps {
                let x = i as f64 * h;
                let w = if i == 0 || i == steps { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                let tail = 1.0 - beta_cdf(x, a, b).unwrap();
                m1 += w * tail;
                m2 += w * 2.0 * x * tail;
            }
            m1 *= h / 3.0;
            m2 *= h / 3.0;
            let var = m2 - m1 * m1;
            let np1 = n as f64 + 1.0;
            assert!((m1 - l / np1).abs() < 1e-8);
            let exact = l * (np1 - l) / (np1 * np1 * (np1 + 1.0));
            assert!((var - exact).abs() < 1e-8, "n={n}: {var} vs {exact}");
        }
    }

    fn loop_cov_gap(c: &[f64], alpha: f64) -> f64 {
        let mut acc = 0.0;
        for &x in c {
            acc += (x - (1.0 - alpha)).abs();
        }
        100.0 * (acc / c.len() as f64)
    }

    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        let mut sup: f64 = 0.0;
        for &t in a.iter().chain(b) {
            sup = sup.max((empirical_cdf(a, t) - empirical_cdf(b, t)).abs());
        }
        sup
    }

    proptest! {
        #[test]
        fn gaps_match_loops(c in prop::collection::vec(0.0f64..=1.0, 1..40), alpha in 0.01f64..0.5) {
            prop_assert_eq!(cov_gap(&c, alpha), loop_cov_gap(&c, alpha));
            prop_assert_eq!(class_cov_gap(&c, alpha), cov_gap(&c, alpha));
            let (o, u) = over_under_gaps(&c, alpha);
            let mut lo = 0.0;
            let mut lu = 0.0;
            for &x in &c {
                if x > 1.0 - alpha { lo += x - (1.0 - alpha); }
                if x < 1.0 - alpha { lu += (1.0 - alpha) - x; }
            }
            prop_assert_eq!(o, 100.0 * (lo / c.len() as f64));
            prop_assert_eq!(u, 100.0 * (lu / c.len() as f64));
            prop_assert!((o + u - cov_gap(&c, alpha)).abs() < 1e-9);
        }

        #[test]
        fn improvement_matches_formula(s in 0.1f64..10.0, m in 0.0f64..10.0, o in 0.0f64..0.09) {
            prop_assert_eq!(improvement(s, m, o).unwrap(), 100.0 * (s - m) / (s - o));
        }

        #[test]
        fn ks_matches_brute_force(a in prop::collection::vec(0u8..20, 1..30), b in prop::collection::vec(0u8..20, 1..30)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert!((ks_distance(&a, &b) - brute_ks(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn ks_is_pseudometric(a in prop::collection::vec(0.0f64..1.0, 1..25), b in prop::collection::vec(0.0f64..1.0, 1..25), c in prop::collection::vec(0.0f64..1.0, 1..25)) {
            prop_assert_eq!(ks_distance(&a, &b), ks_distance(&b, &a));
            prop_assert_eq!(ks_distance(&a, &a), 0.0);
            prop_assert!(ks_distance(&a, &c) <= ks_distance(&a, &b) + ks_distance(&b, &c) + 1e-12);
        }
    }
}
