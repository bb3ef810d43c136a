//! Nonconformity scores for unlabeled samples.
//!
//! An unlabeled sample only has a *pseudo score*: the score of its
//! pseudo-label (the argmax class). Pseudo scores are biased low, so each
//! estimator adds a bias correction learned from the labeled pool, where the
//! bias `true_score - pseudo_score` of every sample is known:
//!
//! * nearest neighbor matching (NNM): the bias of the labeled sample whose
//!   pseudo score is closest, or the mean bias of the `k` closest;
//! * NNM-R: NNM for randomized scores, re-evaluating the matched sample's
//!   bias with the unlabeled sample's own random factor;
//! * naive: no correction;
//! * debias: the mean bias of the whole labeled pool;
//! * random match: the bias of a uniformly drawn labeled sample.
//!
//! Matching always uses deterministic scores. Distance ties go to the
//! labeled sample with the smaller index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Channel, ProbVector, Subset};
use crate::error::{Error, Result};
use crate::scores::{ScoreSpec, Scorer};

/// Argmax class, ties to the lowest index.
pub fn pseudo_label(p: ProbVector<'_>) -> usize {
    p.argmax().0
}

/// A labeled sample's pseudo score, true score and their gap.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScoreRecord {
    pub pseudo_score: f64,
    pub true_score: f64,
    /// `true_score - pseudo_score`.
    pub bias: f64,
    /// Position of the sample in the labeled pool.
    pub original_index: usize,
    /// Largest softmax probability.
    pub confidence: f64,
    /// Deterministic scores of every label.
    pub score_vector: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborKind {
    /// Closest pseudo score (NNM).
    PseudoScore,
    /// Closest top-class probability.
    Confidence,
    /// Closest full score vector (Euclidean).
    ScoreVector,
    /// Closest logit vector (Euclidean).
    Logit,
    /// Closest feature vector (Euclidean).
    Feature,
}

impl NeighborKind {
    pub fn name(self) -> &'static str {
        match self {
            NeighborKind::PseudoScore => "pseudo_score",
            NeighborKind::Confidence => "confidence",
            NeighborKind::ScoreVector => "score_vector",
            NeighborKind::Logit => "logit",
            NeighborKind::Feature => "feature",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeighborCriterion {
    pub kind: NeighborKind,
    pub k: usize,
}

impl Default for NeighborCriterion {
    fn default() -> Self {
        Self::nnm()
    }
}

impl NeighborCriterion {
    pub fn nnm() -> Self {
        Self {
            kind: NeighborKind::PseudoScore,
            k: 1,
        }
    }

    pub fn k_nearest(k: usize) -> Self {
        Self {
            kind: NeighborKind::PseudoScore,
            k,
        }
    }

    pub fn by(kind: NeighborKind) -> Self {
        Self { kind, k: 1 }
    }
}

/// 1-D nearest-neighbor lookup over a sorted key.
#[derive(Clone, Debug)]
struct SortedKey {
    sorted: Vec<f64>,
    /// Record index at each sorted position; ascending within equal keys.
    order: Vec<usize>,
}

impl SortedKey {
    fn new(keys: impl Iterator<Item = f64>) -> Self {
        let keys: Vec<f64> = keys.collect();
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
        let sorted = order.iter().map(|&i| keys[i]).collect();
        Self { sorted, order }
    }

    /// Record minimizing `(|key - q|, index)`.
    fn nearest(&self, q: f64) -> usize {
        let s = &self.sorted;
        let pos = s.partition_point(|&x| x < q);
        let mut best: Option<(f64, usize)> = None;
        let consider = |d: f64, rec: usize, best: &mut Option<(f64, usize)>| {
            if best.is_none_or(|(bd, br)| d < bd || (d == bd && rec < br)) {
                *best = Some((d, rec));
            }
        };
        // Walk distinct keys outward while the distance can still tie; the
        // first position of a run of equal keys holds its smallest index.
        let mut j = pos;
        while j < s.len() {
            let d = s[j] - q;
            if best.is_some_and(|(bd, _)| d > bd) {
                break;
            }
            consider(d, self.order[j], &mut best);
            let v = s[j];
            j += s[j..].partition_point(|&x| x <= v);
        }
        let mut j = pos;
        while j > 0 {
            let v = s[j - 1];
            let d = q - v;
            if best.is_some_and(|(bd, _)| d > bd) {
                break;
            }
            let start = s[..j].partition_point(|&x| x < v);
            consider(d, self.order[start], &mut best);
            j = start;
        }
        best.expect("nonempty key").1
    }

    /// The `k` records with smallest `(|key - q|, index)`, nearest first.
    fn nearest_k(&self, q: f64, k: usize) -> Vec<usize> {
        if k == 1 {
            return vec![self.nearest(q)];
        }
        let s = &self.sorted;
        let n = s.len();
        let k = k.min(n);
        let pos = s.partition_point(|&x| x < q);
        let (mut lo, mut hi) = (pos, pos);
        let mut kth = 0.0;
        for _ in 0..k {
            let dl = if lo > 0 { q - s[lo - 1] } else { f64::INFINITY };
            let dr = if hi < n { s[hi] - q } else { f64::INFINITY };
            if dl <= dr {
                kth = dl;
                lo -= 1;
            } else {
                kth = dr;
                hi += 1;
            }
        }
        while lo > 0 && q - s[lo - 1] <= kth {
            lo -= 1;
        }
        while hi < n && s[hi] - q <= kth {
            hi += 1;
        }
        let mut cand: Vec<(f64, usize)> = (lo..hi).map(|p| ((s[p] - q).abs(), self.order[p])).collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        cand.into_iter().map(|(_, r)| r).collect()
    }
}

/// What is known about a sample when looking for its labeled neighbors.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub pseudo_score: f64,
    pub confidence: f64,
    pub score_vector: &'a [f64],
    pub logits: Option<&'a [f64]>,
    pub features: Option<&'a [f64]>,
}

/// Labeled pool prepared for matching: one record per labeled sample plus
/// the pseudo scores in sorted order.
#[derive(Clone, Debug)]
pub struct LabeledIndex<'a> {
    spec: ScoreSpec,
    labeled: Option<Subset<'a>>,
    records: Vec<LabeledScoreRecord>,
    by_pseudo: SortedKey,
    by_confidence: SortedKey,
}

/// Score every labeled sample under the deterministic form of `spec`.
pub fn build_labeled_records<'a>(labeled: Subset<'a>, spec: &ScoreSpec) -> Result<LabeledIndex<'a>> {
    spec.validate()?;
    let labels = labeled.require_labels()?;
    let spec = spec.deterministic();
    let mut scorer = Scorer::new(spec);
    let mut records = Vec::with_capacity(labeled.len());
    for (i, &y) in labels.iter().enumerate() {
        let p = labeled.probs(i);
        let (yhat, confidence) = p.argmax();
        let scores = scorer.all_labels(p, None)?;
        let pseudo_score = scores[yhat];
        let true_score = scores[y];
        records.push(LabeledScoreRecord {
            pseudo_score,
            true_score,
            bias: true_score - pseudo_score,
            original_index: i,
            confidence,
            score_vector: scores.to_vec(),
        });
    }
    let mut index = LabeledIndex::from_records(spec, records);
    index.labeled = Some(labeled);
    Ok(index)
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<'a> LabeledIndex<'a> {
    /// Index over precomputed records, without the underlying samples.
    /// Matching on logits or features and NNM-R are then unavailable.
    pub fn from_records(spec: ScoreSpec, records: Vec<LabeledScoreRecord>) -> Self {
        let by_pseudo = SortedKey::new(records.iter().map(|r| r.pseudo_score));
        let by_confidence = SortedKey::new(records.iter().map(|r| r.confidence));
        Self {
            spec: spec.deterministic(),
            labeled: None,
            records,
            by_pseudo,
            by_confidence,
        }
    }

    fn samples(&self) -> Result<Subset<'a>> {
        self.labeled
            .ok_or_else(|| Error::input("labeled index was built without its samples"))
    }

    pub fn records(&self) -> &[LabeledScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The deterministic score function used for matching.
    pub fn spec(&self) -> &ScoreSpec {
        &self.spec
    }

    /// Record indices in ascending pseudo-score order.
    pub fn sorted_by_pseudo(&self) -> &[usize] {
        &self.by_pseudo.order
    }

    pub fn mean_bias(&self) -> f64 {
        self.records.iter().map(|r| r.bias).sum::<f64>() / self.records.len() as f64
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Estimation("labeled pool is empty".into()));
        }
        Ok(())
    }

    fn check_channels(&self, criterion: &NeighborCriterion) -> Result<()> {
        if criterion.k == 0 {
            return Err(Error::config("number of neighbors must be positive"));
        }
        if criterion.k > self.records.len() {
            return Err(Error::config(format!(
                "{} neighbors requested from {} labeled samples",
                criterion.k,
                self.records.len()
            )));
        }
        let channel = match criterion.kind {
            NeighborKind::Logit => Channel::Logits,
            NeighborKind::Feature => Channel::Features,
            _ => return Ok(()),
        };
        if !self.samples()?.dataset().has_channel(channel) {
            return Err(Error::input(format!("labeled data has no {channel} channel")));
        }
        Ok(())
    }

    /// Indices of the `criterion.k` records nearest to `query`, nearest first.
    pub fn neighbor_match(&self, query: &Query<'_>, criterion: &NeighborCriterion) -> Result<Vec<usize>> {
        self.check_nonempty()?;
        self.check_channels(criterion)?;
        let k = criterion.k;
        Ok(match criterion.kind {
            NeighborKind::PseudoScore => self.by_pseudo.nearest_k(query.pseudo_score, k),
            NeighborKind::Confidence => self.by_confidence.nearest_k(query.confidence, k),
            NeighborKind::ScoreVector => self.scan(k, |r| euclidean_sq(query.score_vector, &self.records[r].score_vector)),
            NeighborKind::Logit => {
                let q = query.logits.ok_or_else(|| Error::input("query has no logits channel"))?;
                let labeled = self.samples()?;
                self.scan(k, |r| euclidean_sq(q, labeled.logits(r).expect("checked")))
            }
            NeighborKind::Feature => {
                let q = query.features.ok_or_else(|| Error::input("query has no features channel"))?;
                let labeled = self.samples()?;
                self.scan(k, |r| euclidean_sq(q, labeled.features(r).expect("checked")))
            }
        })
    }

    fn scan(&self, k: usize, dist: impl Fn(usize) -> f64) -> Vec<usize> {
        let mut cand: Vec<(f64, usize)> = (0..self.records.len()).map(|r| (dist(r), r)).collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        cand.into_iter().map(|(_, r)| r).collect()
    }

    fn mean_bias_of(&self, matched: &[usize]) -> f64 {
        if let [j] = matched {
            return self.records[*j].bias;
        }
        matched.iter().map(|&j| self.records[j].bias).sum::<f64>() / matched.len() as f64
    }
}

/// Deterministic scoring of unlabeled samples, building match queries.
struct QueryBuilder<'a> {
    unlabeled: Subset<'a>,
    scorer: Scorer,
}

impl<'a> QueryBuilder<'a> {
    fn new(unlabeled: Subset<'a>, spec: ScoreSpec) -> Self {
        Self {
            unlabeled,
            scorer: Scorer::new(spec.deterministic()),
        }
    }

    fn pseudo(&mut self, i: usize) -> Result<f64> {
        self.scorer.pseudo(self.unlabeled.probs(i), None)
    }

    fn with_query<T>(&mut self, i: usize, f: impl FnOnce(&Query<'_>) -> Result<T>) -> Result<T> {
        let p = self.unlabeled.probs(i);
        let (yhat, confidence) = p.argmax();
        let scores = self.scorer.all_labels(p, None)?;
        let query = Query {
            pseudo_score: scores[yhat],
            confidence,
            score_vector: scores,
            logits: self.unlabeled.logits(i),
            features: self.unlabeled.features(i),
        };
        f(&query)
    }
}

fn check_query_channels(unlabeled: Subset<'_>, criterion: &NeighborCriterion) -> Result<()> {
    let channel = match criterion.kind {
        NeighborKind::Logit => Channel::Logits,
        NeighborKind::Feature => Channel::Features,
        _ => return Ok(()),
    };
    if !unlabeled.dataset().has_channel(channel) {
        return Err(Error::input(format!("unlabeled data has no {channel} channel")));
    }
    Ok(())
}

/// Labeled record(s) matched to each unlabeled sample.
pub fn match_all(unlabeled: Subset<'_>, index: &LabeledIndex<'_>, criterion: &NeighborCriterion) -> Result<Vec<Vec<usize>>> {
    index.check_nonempty()?;
    index.check_channels(criterion)?;
    check_query_channels(unlabeled, criterion)?;
    let mut qb = QueryBuilder::new(unlabeled, index.spec);
    (0..unlabeled.len())
        .map(|i| {
            if criterion.kind == NeighborKind::PseudoScore {
                let q = qb.pseudo(i)?;
                Ok(index.by_pseudo.nearest_k(q, criterion.k))
            } else {
                qb.with_query(i, |q| index.neighbor_match(q, criterion))
            }
        })
        .collect()
}

/// Pseudo score plus the (mean) bias of the matched labeled record(s).
pub fn nnm_scores(unlabeled: Subset<'_>, index: &LabeledIndex<'_>, criterion: &NeighborCriterion) -> Result<Vec<f64>> {
    index.check_nonempty()?;
    if criterion.kind == NeighborKind::PseudoScore && criterion.k == 1 {
        // Fast path: no per-sample allocation.
        let mut qb = QueryBuilder::new(unlabeled, index.spec);
        return (0..unlabeled.len())
            .map(|i| {
                let q = qb.pseudo(i)?;
                Ok(q + index.records[index.by_pseudo.nearest(q)].bias)
            })
            .collect();
    }
    let matches = match_all(unlabeled, index, criterion)?;
    let mut qb = QueryBuilder::new(unlabeled, index.spec);
    matches
        .iter()
        .enumerate()
        .map(|(i, m)| Ok(qb.pseudo(i)? + index.mean_bias_of(m)))
        .collect()
}

/// Pseudo scores with no correction. `u` supplies per-sample random
/// factors for randomized specs.
pub fn naive_scores(unlabeled: Subset<'_>, spec: &ScoreSpec, u: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut scorer = Scorer::new(*spec);
    (0..unlabeled.len())
        .map(|i| scorer.pseudo(unlabeled.probs(i), factor(spec, u, i)?))
        .collect()
}

fn factor(spec: &ScoreSpec, u: Option<&[f64]>, i: usize) -> Result<Option<f64>> {
    if !spec.randomized {
        return Ok(None);
    }
    let u = u.ok_or_else(|| Error::config("randomized score requires random factors"))?;
    u.get(i)
        .copied()
        .map(Some)
        .ok_or_else(|| Error::input(format!("missing random factor for sample {i}")))
}

/// Pseudo score plus the mean labeled bias.
pub fn debias_scores(unlabeled: Subset<'_>, index: &LabeledIndex<'_>) -> Result<Vec<f64>> {
    index.check_nonempty()?;
    let shift = index.mean_bias();
    let mut qb = QueryBuilder::new(unlabeled, index.spec);
    (0..unlabeled.len()).map(|i| Ok(qb.pseudo(i)? + shift)).collect()
}

/// Pseudo score plus the bias of a uniformly drawn labeled record,
/// drawing once per sample in sample order.
pub fn random_match_scores<R: Rng + ?Sized>(unlabeled: Subset<'_>, index: &LabeledIndex<'_>, rng: &mut R) -> Result<Vec<f64>> {
    index.check_nonempty()?;
    let n = index.len();
    let mut qb = QueryBuilder::new(unlabeled, index.spec);
    (0..unlabeled.len())
        .map(|i| {
            let j = rng.random_range(0..n);
            Ok(qb.pseudo(i)? + index.records[j].bias)
        })
        .collect()
}

/// NNM for randomized scores. Matching uses deterministic pseudo scores;
/// the matched sample's bias is then re-evaluated with the unlabeled
/// sample's own factor `u[i]`:
/// `S(x~, y^, u) + S(x_j, y_j, u) - S(x_j, y^_j, u)`.
pub fn nnm_r_scores(
    unlabeled: Subset<'_>,
    index: &LabeledIndex<'_>,
    spec: &ScoreSpec,
    criterion: &NeighborCriterion,
    u: &[f64],
) -> Result<Vec<f64>> {
    if !spec.randomized {
        return Err(Error::config("NNM-R requires a randomized score"));
    }
    if spec.deterministic() != index.spec {
        return Err(Error::config("NNM-R score does not match the labeled index"));
    }
    if u.len() != unlabeled.len() {
        return Err(Error::input("one random factor per unlabeled sample is required"));
    }
    let matches = match_all(unlabeled, index, criterion)?;
    let mut scorer = Scorer::new(*spec);
    let labeled = index.samples()?;
    matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let ui = Some(u[i]);
            let pseudo = scorer.pseudo(unlabeled.probs(i), ui)?;
            let mut bias = 0.0;
            for &j in m {
                let pj = labeled.probs(j);
                let yj = labeled.label(j).expect("labeled pool");
                bias += scorer.label(pj, yj, ui)? - scorer.pseudo(pj, ui)?;
            }
            if m.len() > 1 {
                bias /= m.len() as f64;
            }
            Ok(pseudo + bias)
        })
        .collect()
}

/// How unlabeled scores are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    Nnm(NeighborCriterion),
    NnmR(NeighborCriterion),
    Naive,
    Debias,
    RandomMatch,
}

impl Estimator {
    /// Short tag such as `nnm`, `knnm3`, `nnm_logit` or `random_match`.
    pub fn tag(&self) -> String {
        fn criterion_tag(base: &str, c: &NeighborCriterion) -> String {
            let mut s = if c.k > 1 { format!("k{base}{}", c.k) } else { base.to_string() };
            if c.kind != NeighborKind::PseudoScore {
                s.push('_');
                s.push_str(c.kind.name());
            }
            s
        }
        match self {
            Estimator::Nnm(c) => criterion_tag("nnm", c),
            Estimator::NnmR(c) => criterion_tag("nnm_r", c),
            Estimator::Naive => "naive".into(),
            Estimator::Debias => "debias".into(),
            Estimator::RandomMatch => "random_match".into(),
        }
    }

    /// Estimate scores for `unlabeled` under `spec`.
    ///
    /// For randomized specs, `u` carries each unlabeled sample's factor. The
    /// non-NNM-R estimators add their deterministic bias correction to the
    /// randomized pseudo score.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        unlabeled: Subset<'_>,
        index: &LabeledIndex<'_>,
        spec: &ScoreSpec,
        u: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if let Estimator::NnmR(c) = self {
            let u = u.ok_or_else(|| Error::config("NNM-R requires random factors"))?;
            return nnm_r_scores(unlabeled, index, spec, c, u);
        }
        let corrected = match self {
            Estimator::Nnm(c) => nnm_scores(unlabeled, index, c)?,
            Estimator::Naive => naive_scores(unlabeled, &spec.deterministic(), None)?,
            Estimator::Debias => debias_scores(unlabeled, index)?,
            Estimator::RandomMatch => random_match_scores(unlabeled, index, rng)?,
            Estimator::NnmR(_) => unreachable!(),
        };
        if !spec.randomized {
            return Ok(corrected);
        }
        let det = naive_scores(unlabeled, &spec.deterministic(), None)?;
        let rnd = naive_scores(unlabeled, spec, u)?;
        Ok(corrected
            .iter()
            .zip(det.iter().zip(&rnd))
            .map(|(c, (d, r))| r + (c - d))
            .collect())
    }
}
