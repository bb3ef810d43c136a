//! Thresholds from score pools, and prediction sets from thresholds.
//!
//! A threshold at miscoverage `alpha` over a pool of `m` scores is the
//! `l`-th smallest score with `l = ceil((m + 1)(1 - alpha))`. When `l > m`
//! no finite score qualifies and the threshold includes every label.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cluster::kmeans;
use crate::data::ProbVector;
use crate::error::{Error, Result};
use crate::metrics::empirical_cdf;
use crate::scores::{ScoreSpec, Scorer};

/// Either a finite cutoff or the include-all sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdValue {
    Finite(f64),
    IncludeAll,
}

const INCLUDE_ALL: &str = "INCLUDE_ALL";

impl ThresholdValue {
    pub fn finite(&self) -> Option<f64> {
        match *self {
            ThresholdValue::Finite(v) => Some(v),
            ThresholdValue::IncludeAll => None,
        }
    }

    #[inline]
    pub fn admits(&self, score: f64) -> bool {
        match *self {
            ThresholdValue::Finite(t) => score <= t,
            ThresholdValue::IncludeAll => true,
        }
    }
}

impl fmt::Display for ThresholdValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdValue::Finite(v) => write!(f, "{v}"),
            ThresholdValue::IncludeAll => f.write_str(INCLUDE_ALL),
        }
    }
}

impl Serialize for ThresholdValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            ThresholdValue::Finite(v) => s.serialize_f64(v),
            ThresholdValue::IncludeAll => s.serialize_str(INCLUDE_ALL),
        }
    }
}

impl<'de> Deserialize<'de> for ThresholdValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(ThresholdValue::Finite(v)),
            Repr::Text(t) if t == INCLUDE_ALL => Ok(ThresholdValue::IncludeAll),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold `{t}`"))),
        }
    }
}

/// A calibrated cutoff with the quantile level it was taken at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: ThresholdValue,
    /// Rank `l` of the selected order statistic (the floor of the
    /// interpolation point for interpolated thresholds).
    pub level_index: usize,
    pub pool_size: usize,
    pub alpha: f64,
}

impl Threshold {
    pub fn is_include_all(&self) -> bool {
        self.value == ThresholdValue::IncludeAll
    }

    #[inline]
    pub fn admits(&self, score: f64) -> bool {
        self.value.admits(score)
    }
}

/// Labeled scores `s_1..s_n` plus estimated unlabeled scores `s~_1..s~_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPool {
    labeled: Vec<f64>,
    unlabeled: Vec<f64>,
}

impl ScoredPool {
    pub fn new(labeled: Vec<f64>, unlabeled: Vec<f64>) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Calibration("pool needs at least one labeled score".into()));
        }
        check_finite(&labeled)?;
        check_finite(&unlabeled)?;
        Ok(Self { labeled, unlabeled })
    }

    pub fn labeled_only(labeled: Vec<f64>) -> Result<Self> {
        Self::new(labeled, Vec::new())
    }

    pub fn labeled(&self) -> &[f64] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[f64] {
        &self.unlabeled
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labeled scores followed by unlabeled scores.
    pub fn merged(&self) -> Vec<f64> {
        let mut all = Vec::with_capacity(self.len());
        all.extend_from_slice(&self.labeled);
        all.extend_from_slice(&self.unlabeled);
        all
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::Calibration(format!("score {i} is not finite"))),
        None => Ok(()),
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

// Products such as 10 * 0.9 are meant to be integers; don't let rounding
// push them over.
const LEVEL_SLACK: f64 = 1e-9;

/// `l = ceil((m + 1)(1 - alpha))`.
pub fn conformal_level(m: usize, alpha: f64) -> usize {
    let h = (m as f64 + 1.0) * (1.0 - alpha);
    (h - LEVEL_SLACK * h.max(1.0)).ceil().max(0.0) as usize
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Split-conformal threshold over a pool of scores.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Calibration("empty score pool".into()));
    }
    check_finite(scores)?;
    let m = scores.len();
    let l = conformal_level(m, alpha);
    let value = if l > m {
        ThresholdValue::IncludeAll
    } else {
        ThresholdValue::Finite(sorted(scores)[l.max(1) - 1])
    };
    Ok(Threshold {
        value,
        level_index: l,
        pool_size: m,
        alpha,
    })
}

/// Threshold over the union of labeled and estimated unlabeled scores.
pub fn semicp_threshold(pool: &ScoredPool, alpha: f64) -> Result<Threshold> {
    conformal_quantile(&pool.merged(), alpha)
}

/// Linearly interpolated quantile at `h = (m + 1)(1 - alpha)`, clamped to
/// the observed range. Always finite.
pub fn interpolated_quantile(scores: &[f64], alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Calibration("empty score pool".into()));
    }
    check_finite(scores)?;
    let s = sorted(scores);
    let m = s.len();
    let h = (m as f64 + 1.0) * (1.0 - alpha);
    let k = h.floor();
    let gamma = h - k;
    let k = k as usize;
    let value = if k >= m {
        s[m - 1]
    } else if k < 1 {
        s[0]
    } else if gamma == 0.0 {
        s[k - 1]
    } else {
        s[k - 1] + gamma * (s[k] - s[k - 1])
    };
    Ok(Threshold {
        value: ThresholdValue::Finite(value),
        level_index: k,
        pool_size: m,
        alpha,
    })
}

/// Sorted class indices admitted by a threshold.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet(pub Vec<usize>);

impl PredictionSet {
    pub fn contains(&self, y: usize) -> bool {
        self.0.binary_search(&y).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }
}

pub fn predict_set(p: ProbVector<'_>, spec: &ScoreSpec, t: &Threshold, u: Option<f64>) -> Result<PredictionSet> {
    let mut scorer = Scorer::new(*spec);
    let scores = scorer.all_labels(p, u)?;
    Ok(PredictionSet(
        (0..scores.len()).filter(|&y| t.admits(scores[y])).collect(),
    ))
}

/// Group membership of the labeled and unlabeled calibration scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub n_groups: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroupThreshold {
    pub threshold: Threshold,
    /// Set when the group had no scores and took the marginal threshold.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupThresholds {
    pub marginal: Threshold,
    pub groups: Vec<GroupThreshold>,
}

impl GroupThresholds {
    pub fn get(&self, group: usize) -> &Threshold {
        &self.groups[group].threshold
    }
}

/// Per-group SemiCP thresholds. Groups with no scores fall back to the
/// marginal threshold over the whole pool.
pub fn conditional_thresholds(pool: &ScoredPool, groups: &GroupAssignment, alpha: f64) -> Result<GroupThresholds> {
    if groups.labeled.len() != pool.labeled.len() || groups.unlabeled.len() != pool.unlabeled.len() {
        return Err(Error::input("group assignment does not match pool sizes"));
    }
    if let Some(&g) = groups
        .labeled
        .iter()
        .chain(&groups.unlabeled)
        .find(|&&g| g >= groups.n_groups)
    {
        return Err(Error::input(format!("group id {g} outside 0..{}", groups.n_groups)));
    }
    let marginal = semicp_threshold(pool, alpha)?;
    let mut members = vec![Vec::new(); groups.n_groups];
    for (&s, &g) in pool.labeled.iter().zip(&groups.labeled) {
        members[g].push(s);
    }
    for (&s, &g) in pool.unlabeled.iter().zip(&groups.unlabeled) {
        members[g].push(s);
    }
    let groups = members
        .iter()
        .map(|scores| {
            if scores.is_empty() {
                Ok(GroupThreshold {
                    threshold: marginal,
                    fallback: true,
                })
            } else {
                Ok(GroupThreshold {
                    threshold: conformal_quantile(scores, alpha)?,
                    fallback: false,
                })
            }
        })
        .collect::<Result<_>>()?;
    Ok(GroupThresholds { marginal, groups })
}

/// Settings for clustered class-conditional calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSettings {
    pub n_clusters: usize,
    /// Classes with fewer labeled scores get the marginal threshold.
    pub min_class_count: usize,
    pub seed: u64,
}

impl ClusterSettings {
    pub const KMEANS_ITERATIONS: usize = 50;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassThresholds {
    pub marginal: Threshold,
    pub per_class: Vec<Threshold>,
    /// Cluster of each class, `None` for classes below the count cutoff.
    pub cluster_of: Vec<Option<usize>>,
    pub n_clusters: usize,
    pub warnings: Vec<String>,
}

/// The 9 interior deciles of a sample (inverse empirical CDF).
pub fn decile_embedding(scores: &[f64]) -> [f64; 9] {
    let s = sorted(scores);
    let m = s.len();
    let mut out = [0.0; 9];
    for (i, o) in out.iter_mut().enumerate() {
        let rank = ((i + 1) * m).div_ceil(10).max(1);
        *o = s[rank - 1];
    }
    out
}

/// Class-conditional thresholds shared within clusters of classes whose
/// labeled score distributions look alike.
///
/// `labeled_class` / `unlabeled_class` give the class of each pooled score
/// (true label and pseudo-label respectively).
pub fn clustercp_thresholds(
    pool: &ScoredPool,
    labeled_class: &[usize],
    unlabeled_class: &[usize],
    num_classes: usize,
    alpha: f64,
    settings: &ClusterSettings,
) -> Result<ClassThresholds> {
    if settings.n_clusters == 0 {
        return Err(Error::config("n_clusters must be at least 1"));
    }
    if labeled_class.len() != pool.labeled.len() || unlabeled_class.len() != pool.unlabeled.len() {
        return Err(Error::input("class assignment does not match pool sizes"));
    }
    if let Some(&c) = labeled_class
        .iter()
        .chain(unlabeled_class)
        .find(|&&c| c >= num_classes)
    {
        return Err(Error::input(format!("class {c} outside 0..{num_classes}")));
    }
    let marginal = semicp_threshold(pool, alpha)?;

    let mut labeled_by_class = vec![Vec::new(); num_classes];
    for (&s, &c) in pool.labeled.iter().zip(labeled_class) {
        labeled_by_class[c].push(s);
    }
    let min_count = settings.min_class_count.max(1);
    let embeddable: Vec<usize> = (0..num_classes)
        .filter(|&c| labeled_by_class[c].len() >= min_count)
        .collect();

    let mut warnings = Vec::new();
    let mut cluster_of = vec![None; num_classes];
    let mut per_class = vec![marginal; num_classes];
    if embeddable.is_empty() {
        warnings.push("no class has enough labeled scores; using the marginal threshold".into());
        return Ok(ClassThresholds {
            marginal,
            per_class,
            cluster_of,
            n_clusters: 0,
            warnings,
        });
    }
    let mut k = settings.n_clusters;
    if k > embeddable.len() {
        warnings.push(format!(
            "n_clusters {k} exceeds the {} embeddable classes; reduced",
            embeddable.len()
        ));
        k = embeddable.len();
    }

    let points: Vec<Vec<f64>> = embeddable
        .iter()
        .map(|&c| decile_embedding(&labeled_by_class[c]).to_vec())
        .collect();
    let assignment = kmeans(&points, k, ClusterSettings::KMEANS_ITERATIONS, settings.seed);
    for (&c, &g) in embeddable.iter().zip(&assignment) {
        cluster_of[c] = Some(g);
    }

    let mut cluster_scores = vec![Vec::new(); k];
    for (&s, &c) in pool.labeled.iter().zip(labeled_class) {
        if let Some(g) = cluster_of[c] {
            cluster_scores[g].push(s);
        }
    }
    for (&s, &c) in pool.unlabeled.iter().zip(unlabeled_class) {
        if let Some(g) = cluster_of[c] {
            cluster_scores[g].push(s);
        }
    }
    let cluster_thresholds = cluster_scores
        .iter()
        .map(|scores| {
            if scores.is_empty() {
                Ok(marginal)
            } else {
                conformal_quantile(scores, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for c in 0..num_classes {
        if let Some(g) = cluster_of[c] {
            per_class[c] = cluster_thresholds[g];
        }
    }
    Ok(ClassThresholds {
        marginal,
        per_class,
        cluster_of,
        n_clusters: k,
        warnings,
    })
}

/// Coverage bias diagnostic `N/(N+n) * (F_S(t) - F_S~(t))` from samples of
/// true and estimated scores.
pub fn epsilon_bias(true_scores: &[f64], estimated_scores: &[f64], t: &Threshold, n: usize, big_n: usize) -> Result<f64> {
    if true_scores.is_empty() || estimated_scores.is_empty() {
        return Err(Error::input("epsilon needs nonempty true and estimated samples"));
    }
    let Some(t) = t.value.finite() else {
        return Ok(0.0);
    };
    if big_n == 0 {
        return Ok(0.0);
    }
    let weight = big_n as f64 / (big_n + n) as f64;
    Ok(weight * (empirical_cdf(true_scores, t) - empirical_cdf(estimated_scores, t)))
}
