//! Nonconformity scores for classification: THR, APS, RAPS and SAPS.
//!
//! Lower scores mean a label conforms better to the model output. Classes are
//! ranked by descending probability with ties resolved to the lower class
//! index, so rank 1 is always the pseudo-label.
//!
//! Randomized APS/RAPS/SAPS take a factor `u` in `[0, 1]`; the deterministic
//! variants are the randomized ones evaluated at `u = 1`.

use serde::{Deserialize, Serialize};

use crate::data::ProbVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Thr,
    Aps,
    Raps,
    Saps,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Thr => "thr",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
            ScoreKind::Saps => "saps",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thr" => Ok(ScoreKind::Thr),
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            "saps" => Ok(ScoreKind::Saps),
            other => Err(Error::config(format!("unknown score function `{other}`"))),
        }
    }
}

/// A score function and its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    /// RAPS: number of top ranks exempt from the penalty.
    pub k_reg: usize,
    /// RAPS: penalty per rank beyond `k_reg`.
    pub lambda: f64,
    /// SAPS: weight per rank beyond the first.
    pub weight: f64,
    pub randomized: bool,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self::thr()
    }
}

impl ScoreSpec {
    pub const DEFAULT_K_REG: usize = 2;
    pub const DEFAULT_LAMBDA: f64 = 0.01;
    pub const DEFAULT_SAPS_WEIGHT: f64 = 0.01;

    fn with_kind(kind: ScoreKind) -> Self {
        Self {
            kind,
            k_reg: Self::DEFAULT_K_REG,
            lambda: Self::DEFAULT_LAMBDA,
            weight: Self::DEFAULT_SAPS_WEIGHT,
            randomized: false,
        }
    }

    pub fn thr() -> Self {
        Self::with_kind(ScoreKind::Thr)
    }

    pub fn aps() -> Self {
        Self::with_kind(ScoreKind::Aps)
    }

    pub fn raps(k_reg: usize, lambda: f64) -> Self {
        Self {
            k_reg,
            lambda,
            ..Self::with_kind(ScoreKind::Raps)
        }
    }

    pub fn saps(weight: f64) -> Self {
        Self {
            weight,
            ..Self::with_kind(ScoreKind::Saps)
        }
    }

    pub fn randomized(self) -> Self {
        Self {
            randomized: true,
            ..self
        }
    }

    pub fn deterministic(self) -> Self {
        Self {
            randomized: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScoreKind::Raps && self.k_reg == 0 {
            return Err(Error::config("RAPS k_reg must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("RAPS lambda must be a nonnegative number"));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::config("SAPS weight must be a nonnegative number"));
        }
        if self.randomized && self.kind == ScoreKind::Thr {
            return Err(Error::config("THR has no randomized form"));
        }
        Ok(())
    }

    /// Short label such as `aps` or `raps-r`.
    pub fn label(&self) -> String {
        if self.randomized {
            format!("{}-r", self.kind.name())
        } else {
            self.kind.name().to_string()
        }
    }

    fn resolve_u(&self, u: Option<f64>) -> Result<f64> {
        match (self.randomized, u) {
            (true, Some(u)) if (0.0..=1.0).contains(&u) => Ok(u),
            (true, Some(u)) => Err(Error::input(format!("random factor {u} outside [0, 1]"))),
            (true, None) => Err(Error::config("randomized score requires a random factor")),
            (false, _) => Ok(1.0),
        }
    }
}

/// 1-based descending-probability rank of every class and the probability
/// mass of the classes ranked strictly above it.
pub fn rank_and_cummass(p: ProbVector<'_>) -> (Vec<usize>, Vec<f64>) {
    let mut ranking = Ranking::default();
    ranking.compute(p.values());
    (ranking.ranks, ranking.rho)
}

#[derive(Clone, Debug, Default)]
struct Ranking {
    order: Vec<usize>,
    ranks: Vec<usize>,
    rho: Vec<f64>,
}

impl Ranking {
    fn compute(&mut self, p: &[f64]) {
        let k = p.len();
        self.order.clear();
        self.order.extend(0..k);
        // Stable sort keeps ascending class index among equal probabilities.
        self.order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        self.ranks.resize(k, 0);
        self.rho.resize(k, 0.0);
        let mut mass = 0.0;
        for (pos, &j) in self.order.iter().enumerate() {
            self.ranks[j] = pos + 1;
            self.rho[j] = mass;
            mass += p[j];
        }
    }
}

/// Scores labels of one sample at a time, reusing its ranking buffers.
#[derive(Clone, Debug)]
pub struct Scorer {
    spec: ScoreSpec,
    ranking: Ranking,
    out: Vec<f64>,
}

impl Scorer {
    pub fn new(spec: ScoreSpec) -> Self {
        Self {
            spec,
            ranking: Ranking::default(),
            out: Vec::new(),
        }
    }

    pub fn spec(&self) -> &ScoreSpec {
        &self.spec
    }

    /// Scores of every label of `p`, all with the same random factor.
    pub fn all_labels(&mut self, p: ProbVector<'_>, u: Option<f64>) -> Result<&[f64]> {
        let u = self.spec.resolve_u(u)?;
        let p = p.values();
        self.out.clear();
        if self.spec.kind == ScoreKind::Thr {
            self.out.extend(p.iter().map(|&py| 1.0 - py));
            return Ok(&self.out);
        }
        self.ranking.compute(p);
        let p_max = p[self.ranking.order[0]];
        for (y, &py) in p.iter().enumerate() {
            let s = score_from_ranking(&self.spec, py, p_max, self.ranking.ranks[y], self.ranking.rho[y], u);
            self.out.push(s);
        }
        Ok(&self.out)
    }

    pub fn label(&mut self, p: ProbVector<'_>, y: usize, u: Option<f64>) -> Result<f64> {
        check_label(p, y)?;
        let u = self.spec.resolve_u(u)?;
        let values = p.values();
        if self.spec.kind == ScoreKind::Thr {
            return Ok(1.0 - values[y]);
        }
        self.ranking.compute(values);
        let p_max = values[self.ranking.order[0]];
        Ok(score_from_ranking(
            &self.spec,
            values[y],
            p_max,
            self.ranking.ranks[y],
            self.ranking.rho[y],
            u,
        ))
    }

    /// Score of the pseudo-label (the top-ranked class).
    pub fn pseudo(&mut self, p: ProbVector<'_>, u: Option<f64>) -> Result<f64> {
        let u = self.spec.resolve_u(u)?;
        let (_, p_max) = p.argmax();
        // Rank 1 has no mass above it and no RAPS penalty.
        Ok(match self.spec.kind {
            ScoreKind::Thr => 1.0 - p_max,
            ScoreKind::Aps | ScoreKind::Raps | ScoreKind::Saps => u * p_max,
        })
    }
}

#[inline]
fn score_from_ranking(spec: &ScoreSpec, py: f64, p_max: f64, rank: usize, rho: f64, u: f64) -> f64 {
    match spec.kind {
        ScoreKind::Thr => 1.0 - py,
        ScoreKind::Aps => rho + u * py,
        ScoreKind::Raps => rho + u * py + spec.lambda * rank.saturating_sub(spec.k_reg) as f64,
        ScoreKind::Saps => {
            if rank == 1 {
                u * p_max
            } else {
                p_max + spec.weight * ((rank - 2) as f64 + u)
            }
        }
    }
}

fn check_label(p: ProbVector<'_>, y: usize) -> Result<()> {
    if y >= p.num_classes() {
        return Err(Error::input(format!(
            "class index {y} outside 0..{}",
            p.num_classes()
        )));
    }
    Ok(())
}

/// Score of label `y`. `u` must be given exactly when `spec` is randomized.
pub fn score_label(p: ProbVector<'_>, y: usize, spec: &ScoreSpec, u: Option<f64>) -> Result<f64> {
    Scorer::new(*spec).label(p, y, u)
}

/// Scores of all labels, sharing one random factor.
pub fn score_all_labels(p: ProbVector<'_>, spec: &ScoreSpec, u: Option<f64>) -> Result<Vec<f64>> {
    Scorer::new(*spec).all_labels(p, u).map(<[f64]>::to_vec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector<'_> {
        ProbVector::new(v).unwrap()
    }

    #[test]
    fn ranks_and_mass() {
        let (r, rho) = rank_and_cummass(pv(&[0.5, 0.3, 0.2]));
        assert_eq!(r, vec![1, 2, 3]);
        assert_eq!(rho, vec![0.0, 0.5, 0.8]);

        let (r, rho) = rank_and_cummass(pv(&[0.4, 0.4, 0.2]));
        assert_eq!(r, vec![1, 2, 3]);
        assert_eq!(rho, vec![0.0, 0.4, 0.8]);

        let third = 1.0 / 3.0;
        let (r, rho) = rank_and_cummass(pv(&[third, third, third]));
        assert_eq!(r, vec![1, 2, 3]);
        assert_eq!(rho[0], 0.0);
        assert!((rho[1] - third).abs() < 1e-15);
        assert!((rho[2] - 2.0 * third).abs() < 1e-15);

        let (r, _) = rank_and_cummass(pv(&[0.1, 0.6, 0.3]));
        assert_eq!(r, vec![3, 1, 2]);
    }

    #[test]
    fn single_label_examples() {
        let thr = score_label(pv(&[0.7, 0.2, 0.1]), 0, &ScoreSpec::thr(), None).unwrap();
        assert!((thr - 0.3).abs() < 1e-15);
        let aps = score_label(pv(&[0.5, 0.3, 0.2]), 1, &ScoreSpec::aps(), None).unwrap();
        assert!((aps - 0.8).abs() < 1e-15);
        let raps = score_label(pv(&[0.5, 0.3, 0.2]), 2, &ScoreSpec::raps(2, 0.01), None).unwrap();
        assert!((raps - 1.01).abs() < 1e-12);
    }

    #[test]
    fn saps_matches_straight_line_formula() {
        // Independent restatement: p_max + weight * (rank - 2 + u) off the top rank.
        fn saps(p_max: f64, rank: usize, u: f64, w: f64) -> f64 {
            if rank == 1 {
                u * p_max
            } else {
                p_max + w * (rank as f64 - 2.0 + u)
            }
        }
        let spec = ScoreSpec::saps(0.01).randomized();
        let p = pv(&[0.5, 0.3, 0.2]);
        let s = score_label(p, 1, &spec, Some(0.5)).unwrap();
        assert!((s - 0.505).abs() < 1e-15);
        assert_eq!(s, saps(0.5, 2, 0.5, 0.01));
        assert_eq!(score_label(p, 0, &spec, Some(0.5)).unwrap(), saps(0.5, 1, 0.5, 0.01));
        assert_eq!(score_label(p, 2, &spec, Some(0.25)).unwrap(), saps(0.5, 3, 0.25, 0.01));
        // Deterministic SAPS is u = 1.
        let det = score_label(p, 2, &ScoreSpec::saps(0.01), None).unwrap();
        assert_eq!(det, saps(0.5, 3, 1.0, 0.01));
    }

    #[test]
    fn all_labels_examples() {
        let s = score_all_labels(pv(&[0.7, 0.2, 0.1]), &ScoreSpec::thr(), None).unwrap();
        for (a, b) in s.iter().zip([0.3, 0.8, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = score_all_labels(pv(&[0.5, 0.3, 0.2]), &ScoreSpec::aps(), None).unwrap();
        assert_eq!(s, vec![0.5, 0.8, 1.0]);
    }

    #[test]
    fn errors() {
        let p = pv(&[0.5, 0.5]);
        assert!(matches!(score_label(p, 2, &ScoreSpec::thr(), None), Err(Error::Input(_))));
        assert!(matches!(
            score_label(p, 0, &ScoreSpec::aps().randomized(), None),
            Err(Error::Config(_))
        ));
        assert!(score_label(p, 0, &ScoreSpec::aps().randomized(), Some(1.5)).is_err());
        assert!(ScoreSpec::thr().randomized().validate().is_err());
        assert!(ScoreSpec::raps(0, 0.01).validate().is_err());
    }

    #[test]
    fn pseudo_score_is_top_rank_score() {
        for spec in [ScoreSpec::thr(), ScoreSpec::aps(), ScoreSpec::raps(1, 0.3), ScoreSpec::saps(0.2)] {
            let p = pv(&[0.2, 0.45, 0.35]);
            let mut sc = Scorer::new(spec);
            assert_eq!(sc.pseudo(p, None).unwrap(), sc.label(p, 1, None).unwrap());
        }
    }

    fn prob_vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    fn any_spec() -> impl Strategy<Value = ScoreSpec> {
        prop_oneof![
            Just(ScoreSpec::thr()),
            Just(ScoreSpec::aps()),
            (1usize..4, 0.0f64..0.5).prop_map(|(k, l)| ScoreSpec::raps(k, l)),
            (0.0f64..0.5).prop_map(ScoreSpec::saps),
        ]
    }

    proptest! {
        #[test]
        fn batch_equals_per_label(p in prob_vector(), spec in any_spec(), u in 0.0f64..=1.0, rand in any::<bool>()) {
            let spec = if rand && spec.kind != ScoreKind::Thr { spec.randomized() } else { spec };
            let u = spec.randomized.then_some(u);
            let pv = ProbVector::new(&p).unwrap();
            let all = score_all_labels(pv, &spec, u).unwrap();
            for (y, s) in all.iter().enumerate() {
                prop_assert_eq!(s.to_bits(), score_label(pv, y, &spec, u).unwrap().to_bits());
            }
        }

        #[test]
        fn randomized_at_one_is_deterministic(p in prob_vector(), spec in any_spec()) {
            prop_assume!(spec.kind != ScoreKind::Thr);
            let pv = ProbVector::new(&p).unwrap();
            let det = score_all_labels(pv, &spec, None).unwrap();
            let rnd = score_all_labels(pv, &spec.randomized(), Some(1.0)).unwrap();
            prop_assert_eq!(det, rnd);
        }

        #[test]
        fn aps_range_and_monotone(p in prob_vector(), k in 1usize..4, l in 0.0f64..0.5) {
            let pv = ProbVector::new(&p).unwrap();
            let (ranks, _) = rank_and_cummass(pv);
            let aps = score_all_labels(pv, &ScoreSpec::aps(), None).unwrap();
            let p_max = p.iter().copied().fold(0.0, f64::max);
            let min = aps.iter().copied().fold(f64::INFINITY, f64::min);
            let max = aps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((min - p_max).abs() < 1e-12);
            prop_assert!((max - 1.0).abs() < 1e-12);
            let raps = score_all_labels(pv, &ScoreSpec::raps(k, l), None).unwrap();
            for a in 0..p.len() {
                for b in 0..p.len() {
                    if ranks[a] < ranks[b] {
                        prop_assert!(aps[a] <= aps[b]);
                        prop_assert!(raps[a] <= raps[b]);
                    }
                }
            }
        }

        #[test]
        fn thr_strictly_decreasing_in_probability(p in prob_vector()) {
            let pv = ProbVector::new(&p).unwrap();
            let thr = score_all_labels(pv, &ScoreSpec::thr(), None).unwrap();
            for a in 0..p.len() {
                for b in 0..p.len() {
                    if p[a] < p[b] {
                        prop_assert!(thr[a] > thr[b]);
                    }
                }
            }
        }
    }
}
