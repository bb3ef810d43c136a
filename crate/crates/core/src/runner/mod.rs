//! Repeated-split experiments comparing calibration methods.
//!
//! Each trial draws disjoint labeled, unlabeled and test pools, calibrates
//! every configured method on the same split, and measures coverage and set
//! size on the test pool. Trials only depend on `(base_seed, trial)`, so
//! results are identical for any number of worker threads.

mod config;

pub use config::{CalibrationMode, DataSource, ExperimentConfig, Method, SweepSpec, CONFIG_VERSION};

use std::path::PathBuf;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::{
    clustercp_thresholds, conditional_thresholds, conformal_quantile, epsilon_bias, interpolated_quantile,
    semicp_threshold, ClusterSettings, GroupAssignment, ScoredPool, Threshold,
};
use crate::cluster::kmeans;
use crate::data::{Channel, ProbabilityDataset, Subset};
use crate::datagen::{calibrate_signal_for_accuracy, generate_synthetic, measure_top1_accuracy, SignalCalibration};
use crate::error::{Error, Result};
use crate::io::{load_dataset, ResultRecord};
use crate::metrics::{improvement, MetricsSummary, TrialResult};
use crate::rng::{self, purpose};
use crate::scores::{ScoreSpec, Scorer};
use crate::unlabeled::{build_labeled_records, pseudo_label, Estimator, NeighborKind};

const LABELED: usize = 0;
const UNLABELED: usize = 1;
const TEST: usize = 2;
const POOL_NAMES: [&str; 3] = ["labeled", "unlabeled", "test"];

/// Rows drawn for one trial, as indices into each pool's source dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

/// A prepared experiment: data loaded or generated, checked against the
/// config, and group structure computed.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    sources: Vec<ProbabilityDataset>,
    /// Source index of the labeled, unlabeled and test pools.
    pool_source: [usize; 3],
    /// Feature cluster of every row of every source (group-conditional mode).
    row_groups: Option<Vec<Vec<usize>>>,
    accuracy: f64,
    signal: Option<SignalCalibration>,
}

/// Per-method outcome of an experiment.
#[derive(Clone, Debug, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub score: ScoreSpec,
    pub summary: MetricsSummary,
    pub improvement: Option<f64>,
    pub trials: Vec<TrialResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub accuracy: f64,
    pub signal: Option<SignalCalibration>,
    pub methods: Vec<MethodReport>,
}

impl ExperimentReport {
    pub fn get(&self, method: Method, score: &ScoreSpec) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method && m.score == *score)
    }

    /// The first report for `method`, whatever the score.
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn records(&self, config: &ExperimentConfig) -> Vec<ResultRecord> {
        self.methods
            .iter()
            .map(|m| ResultRecord {
                method: m.method.to_string(),
                score: m.score.label(),
                mode: config.mode.to_string(),
                n: config.n,
                big_n: config.big_n,
                alpha: config.alpha,
                trials: m.summary.trials,
                cov_gap: m.summary.cov_gap,
                over_cov_gap: m.summary.over_cov_gap,
                under_cov_gap: m.summary.under_cov_gap,
                avg_size: m.summary.mean_avg_size,
                improvement: m.improvement,
                histogram: m.summary.histogram.clone(),
                mean_coverage: m.summary.mean_coverage,
                group_cov_gap: m.summary.group_cov_gap,
                group_coverage: m.summary.group_coverage.clone(),
                mean_epsilon: m.summary.mean_epsilon,
                accuracy: Some(self.accuracy),
            })
            .collect()
    }
}

/// How the test pool is judged against calibrated thresholds.
enum Rule {
    Single(Threshold),
    /// One threshold per feature group of the test input.
    ByGroup(Vec<Threshold>),
    /// One threshold per candidate label.
    ByClass(Vec<Threshold>),
}

fn all_labeled(data: &ProbabilityDataset) -> bool {
    data.labels().iter().all(Option::is_some)
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut signal = None;
        let (sources, pool_source) = match &config.data {
            DataSource::Synthetic(s) => {
                let mut s = s.clone();
                if let Some(target) = config.target_accuracy {
                    let cal = calibrate_signal_for_accuracy(target, &s, SignalCalibration::DEFAULT_TOLERANCE)?;
                    s.signal = cal.signal;
                    signal = Some(cal);
                }
                (vec![generate_synthetic(&s)?], [0; 3])
            }
            DataSource::File { path } => (vec![load_dataset(path)?], [0; 3]),
            DataSource::Files { labeled, unlabeled, test } => {
                let mut paths: Vec<&PathBuf> = Vec::new();
                let mut pool_source = [0; 3];
                for (slot, p) in [labeled, unlabeled, test].into_iter().enumerate() {
                    pool_source[slot] = match paths.iter().position(|q| *q == p) {
                        Some(i) => i,
                        None => {
                            paths.push(p);
                            paths.len() - 1
                        }
                    };
                }
                let sources = paths.into_iter().map(load_dataset).collect::<Result<Vec<_>>>()?;
                (sources, pool_source)
            }
        };
        let k = sources[0].num_classes();
        if sources.iter().any(|d| d.num_classes() != k) {
            return Err(Error::config("data sources disagree on the number of classes"));
        }

        let counts = [config.n, config.big_n, config.test_size];
        for (s, data) in sources.iter().enumerate() {
            let need: usize = (0..3).filter(|&p| pool_source[p] == s).map(|p| counts[p]).sum();
            if need > data.len() {
                return Err(Error::config(format!(
                    "pools need {need} rows from a source with only {}",
                    data.len()
                )));
            }
        }
        for pool in [LABELED, TEST] {
            if !all_labeled(&sources[pool_source[pool]]) {
                return Err(Error::config(format!("the {} source must be fully labeled", POOL_NAMES[pool])));
            }
        }
        if config.methods.contains(&Method::Oracle) && !all_labeled(&sources[pool_source[UNLABELED]]) {
            return Err(Error::config("the oracle needs labels on the unlabeled source"));
        }
        let require = |channel: Channel, pools: &[usize], why: &str| -> Result<()> {
            for &p in pools {
                if !sources[pool_source[p]].has_channel(channel) {
                    return Err(Error::config(format!(
                        "{why} needs {channel} on the {} source",
                        POOL_NAMES[p]
                    )));
                }
            }
            Ok(())
        };
        for m in &config.methods {
            if let Method::SemiCp(Estimator::Nnm(c) | Estimator::NnmR(c)) = m {
                match c.kind {
                    NeighborKind::Logit => require(Channel::Logits, &[LABELED, UNLABELED], &m.to_string())?,
                    NeighborKind::Feature => require(Channel::Features, &[LABELED, UNLABELED], &m.to_string())?,
                    _ => {}
                }
            }
        }

        let row_groups = match config.mode {
            CalibrationMode::GroupConditional { groups } => {
                require(Channel::Features, &[LABELED, UNLABELED, TEST], "group-conditional calibration")?;
                Some(feature_groups(&sources, groups, config.base_seed))
            }
            _ => None,
        };
        let accuracy = measure_top1_accuracy(sources[pool_source[TEST]].view());
        Ok(Self {
            config,
            sources,
            pool_source,
            row_groups,
            accuracy,
            signal,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Measured top-1 accuracy of the test source.
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    fn source(&self, pool: usize) -> &ProbabilityDataset {
        &self.sources[self.pool_source[pool]]
    }

    /// The labeled, unlabeled and test subsets of a split.
    pub fn subsets<'a>(&'a self, plan: &'a SplitPlan) -> [Subset<'a>; 3] {
        [
            self.source(LABELED).subset(&plan.labeled),
            self.source(UNLABELED).subset(&plan.unlabeled),
            self.source(TEST).subset(&plan.test),
        ]
    }

    /// Draw the pools of one trial. Pools sharing a source get disjoint rows.
    pub fn split(&self, trial: usize) -> SplitPlan {
        let mut rng = rng::trial_stream(self.config.base_seed, trial, purpose::SPLIT);
        let counts = [self.config.n, self.config.big_n, self.config.test_size];
        let mut pools: [Vec<usize>; 3] = Default::default();
        for (s, data) in self.sources.iter().enumerate() {
            let users: Vec<usize> = (0..3).filter(|&p| self.pool_source[p] == s).collect();
            let total: usize = users.iter().map(|&p| counts[p]).sum();
            let rows = rand::seq::index::sample(&mut rng, data.len(), total).into_vec();
            let mut start = 0;
            for p in users {
                pools[p] = rows[start..start + counts[p]].to_vec();
                start += counts[p];
            }
        }
        let [labeled, unlabeled, test] = pools;
        SplitPlan { labeled, unlabeled, test }
    }

    /// Run one trial for the score at `score_index`; one result per method,
    /// in config order.
    pub fn run_trial(&self, score_index: usize, trial: usize) -> Result<Vec<TrialResult>> {
        let cfg = &self.config;
        let spec = *cfg
            .scores
            .get(score_index)
            .ok_or_else(|| Error::config(format!("no score at index {score_index}")))?;
        let alpha = cfg.alpha;
        let plan = self.split(trial);
        let lab = self.source(LABELED).subset(&plan.labeled);
        let unl = self.source(UNLABELED).subset(&plan.unlabeled);
        let test = self.source(TEST).subset(&plan.test);
        let k = lab.num_classes();

        // Random factors, drawn in pool order.
        let (u_lab, u_unl, u_test) = if spec.randomized {
            let mut r = rng::trial_stream(cfg.base_seed, trial, purpose::RANDOM_FACTOR);
            let mut draw = |len: usize| (0..len).map(|_| r.random::<f64>()).collect::<Vec<_>>();
            (Some(draw(lab.len())), Some(draw(unl.len())), Some(draw(test.len())))
        } else {
            (None, None, None)
        };
        let at = |u: &Option<Vec<f64>>, i: usize| u.as_ref().map(|u| u[i]);

        let mut scorer = Scorer::new(spec);
        let lab_labels = lab.require_labels()?;
        let lab_scores = (0..lab.len())
            .map(|i| scorer.label(lab.probs(i), lab_labels[i], at(&u_lab, i)))
            .collect::<Result<Vec<_>>>()?;
        let unl_labels: Option<Vec<usize>> = (0..unl.len()).map(|i| unl.label(i)).collect();
        let unl_true = unl_labels
            .as_ref()
            .map(|ys| {
                (0..unl.len())
                    .map(|i| scorer.label(unl.probs(i), ys[i], at(&u_unl, i)))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let test_labels = test.require_labels()?;
        let mut test_scores = Vec::with_capacity(test.len() * k);
        for i in 0..test.len() {
            test_scores.extend_from_slice(scorer.all_labels(test.probs(i), at(&u_test, i))?);
        }
        let unl_pseudo: Vec<usize> = (0..unl.len()).map(|i| pseudo_label(unl.probs(i))).collect();

        let index = if cfg.methods.iter().any(|m| matches!(m, Method::SemiCp(_))) {
            Some(build_labeled_records(lab, &spec)?)
        } else {
            None
        };

        let mut out = Vec::with_capacity(cfg.methods.len());
        for (mi, method) in cfg.methods.iter().enumerate() {
            let (unl_scores, unl_classes): (Vec<f64>, &[usize]) = match method {
                Method::Standard => (Vec::new(), &[]),
                Method::Oracle => (
                    unl_true.clone().expect("oracle labels checked in prepare"),
                    unl_labels.as_deref().expect("oracle labels checked in prepare"),
                ),
                Method::SemiCp(est) => {
                    let mut r = rng::trial_stream(cfg.base_seed, trial, purpose::RANDOM_MATCH ^ mi as u64);
                    let index = index.as_ref().expect("index built for semicp methods");
                    (est.estimate(unl, index, &spec, u_unl.as_deref(), &mut r)?, &unl_pseudo)
                }
            };
            let took_unlabeled = !unl_scores.is_empty();
            let est_for_eps = matches!(method, Method::SemiCp(_)).then(|| unl_scores.clone());
            let pool = ScoredPool::new(lab_scores.clone(), unl_scores)?;
            let unl_classes = if took_unlabeled { unl_classes } else { &[] };

            let rule = match cfg.mode {
                CalibrationMode::Marginal => Rule::Single(semicp_threshold(&pool, alpha)?),
                CalibrationMode::Interpolation => Rule::Single(interpolated_quantile(&pool.merged(), alpha)?),
                CalibrationMode::GroupConditional { groups } => {
                    let row_groups = self.row_groups.as_ref().expect("groups computed in prepare");
                    let of = |pool: usize, rows: &[usize]| -> Vec<usize> {
                        rows.iter().map(|&r| row_groups[self.pool_source[pool]][r]).collect()
                    };
                    let assignment = GroupAssignment {
                        n_groups: groups,
                        labeled: of(LABELED, &plan.labeled),
                        unlabeled: if took_unlabeled { of(UNLABELED, &plan.unlabeled) } else { Vec::new() },
                    };
                    let t = conditional_thresholds(&pool, &assignment, alpha)?;
                    Rule::ByGroup(t.groups.iter().map(|g| g.threshold).collect())
                }
                CalibrationMode::ClassConditional => {
                    let mut by_class = vec![Vec::new(); k];
                    for (&s, &y) in pool.labeled().iter().zip(&lab_labels) {
                        by_class[y].push(s);
                    }
                    for (&s, &y) in pool.unlabeled().iter().zip(unl_classes) {
                        by_class[y].push(s);
                    }
                    let marginal = semicp_threshold(&pool, alpha)?;
                    Rule::ByClass(
                        by_class
                            .iter()
                            .map(|s| if s.is_empty() { Ok(marginal) } else { conformal_quantile(s, alpha) })
                            .collect::<Result<_>>()?,
                    )
                }
                CalibrationMode::ClusterCp {
                    clusters,
                    min_class_count,
                } => {
                    let settings = ClusterSettings {
                        n_clusters: clusters,
                        min_class_count,
                        seed: rng::mix64(cfg.base_seed, trial as u64),
                    };
                    let t = clustercp_thresholds(&pool, &lab_labels, unl_classes, k, alpha, &settings)?;
                    Rule::ByClass(t.per_class)
                }
            };

            let epsilon = match (&rule, est_for_eps) {
                (Rule::Single(t), Some(est)) if !est.is_empty() => {
                    let truth = unl_true.as_deref().unwrap_or(&lab_scores);
                    Some(epsilon_bias(truth, &est, t, lab.len(), est.len())?)
                }
                _ => None,
            };
            out.push(self.evaluate(method, trial, &rule, &test, &plan.test, &test_scores, &test_labels, epsilon));
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        method: &Method,
        trial: usize,
        rule: &Rule,
        test: &Subset<'_>,
        rows: &[usize],
        scores: &[f64],
        labels: &[usize],
        epsilon: Option<f64>,
    ) -> TrialResult {
        let k = test.num_classes();
        let n_groups = match rule {
            Rule::Single(_) => 0,
            Rule::ByGroup(t) => t.len(),
            Rule::ByClass(_) => k,
        };
        let mut hits = vec![0usize; n_groups];
        let mut seen = vec![0usize; n_groups];
        let mut covered = 0usize;
        let mut size = 0usize;
        for (i, row_scores) in scores.chunks_exact(k).enumerate() {
            let y = labels[i];
            let (group, in_set) = match rule {
                Rule::Single(t) => {
                    size += row_scores.iter().filter(|&&s| t.admits(s)).count();
                    (None, t.admits(row_scores[y]))
                }
                Rule::ByGroup(ts) => {
                    let g = self.row_groups.as_ref().expect("groups computed in prepare")[self.pool_source[TEST]][rows[i]];
                    let t = &ts[g];
                    size += row_scores.iter().filter(|&&s| t.admits(s)).count();
                    (Some(g), t.admits(row_scores[y]))
                }
                Rule::ByClass(ts) => {
                    size += row_scores.iter().zip(ts).filter(|(&s, t)| t.admits(s)).count();
                    (Some(y), ts[y].admits(row_scores[y]))
                }
            };
            covered += usize::from(in_set);
            if let Some(g) = group {
                seen[g] += 1;
                hits[g] += usize::from(in_set);
            }
        }
        let t = labels.len() as f64;
        TrialResult {
            method: method.to_string(),
            trial,
            seed: rng::mix64(self.config.base_seed, trial as u64),
            coverage: covered as f64 / t,
            avg_size: size as f64 / t,
            per_group_coverage: (n_groups > 0).then(|| {
                hits.iter()
                    .zip(&seen)
                    .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
                    .collect()
            }),
            epsilon,
        }
    }

    /// All trials of all scores on a pool of `jobs` threads (0 = all cores).
    pub fn run(&self, jobs: usize) -> Result<ExperimentReport> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        let cfg = &self.config;
        let mut methods = Vec::new();
        for (si, spec) in cfg.scores.iter().enumerate() {
            let per_trial: Vec<Vec<TrialResult>> = pool.install(|| {
                (0..cfg.trials)
                    .into_par_iter()
                    .map(|t| {
                        self.run_trial(si, t).map_err(|e| Error::Trial {
                            trial: t,
                            source: Box::new(e),
                        })
                    })
                    .collect::<Result<_>>()
            })?;
            let mut by_method: Vec<Vec<TrialResult>> = vec![Vec::with_capacity(cfg.trials); cfg.methods.len()];
            for trial in per_trial {
                for (mi, r) in trial.into_iter().enumerate() {
                    by_method[mi].push(r);
                }
            }
            let summaries: Vec<MetricsSummary> =
                by_method.iter().map(|t| MetricsSummary::from_trials(t, cfg.alpha)).collect();
            let gap_of = |m: Method| cfg.methods.iter().position(|&x| x == m).map(|i| summaries[i].cov_gap);
            let (std_gap, oracle_gap) = (gap_of(Method::Standard), gap_of(Method::Oracle));
            for ((method, trials), summary) in cfg.methods.iter().zip(by_method).zip(summaries) {
                let improvement = match (std_gap, oracle_gap) {
                    (Some(s), Some(o)) => improvement(s, summary.cov_gap, o),
                    _ => None,
                };
                methods.push(MethodReport {
                    method: *method,
                    score: *spec,
                    summary,
                    improvement,
                    trials,
                });
            }
        }
        Ok(ExperimentReport {
            accuracy: self.accuracy,
            signal: self.signal,
            methods,
        })
    }
}

/// k-means clusters of the feature vectors of all sources, pooled.
fn feature_groups(sources: &[ProbabilityDataset], groups: usize, seed: u64) -> Vec<Vec<usize>> {
    let points: Vec<Vec<f64>> = sources
        .iter()
        .flat_map(|d| (0..d.len()).map(move |r| d.features(r).expect("features checked").to_vec()))
        .collect();
    let assignment = kmeans(&points, groups, ClusterSettings::KMEANS_ITERATIONS, seed);
    let mut out = Vec::with_capacity(sources.len());
    let mut start = 0;
    for d in sources {
        out.push(assignment[start..start + d.len()].to_vec());
        start += d.len();
    }
    out
}

/// Prepare and run `config`.
pub fn run_experiment(config: ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    Experiment::prepare(config)?.run(jobs)
}

/// Prepare `config` and run a single trial of its first score.
pub fn run_trial(config: ExperimentConfig, trial: usize) -> Result<Vec<TrialResult>> {
    Experiment::prepare(config)?.run_trial(0, trial)
}

/// The grid points of a sweep, base config first-axis-major.
pub fn sweep_configs(config: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let sweep = config.sweep.clone().unwrap_or_default();
    let ns = axis(sweep.n, config.n);
    let big_ns = axis(sweep.big_n, config.big_n);
    let accs: Vec<Option<f64>> = if sweep.accuracy.is_empty() {
        vec![config.target_accuracy]
    } else {
        sweep.accuracy.into_iter().map(Some).collect()
    };
    let modes = axis(sweep.mode, config.mode);
    let mut out = Vec::new();
    for &acc in &accs {
        for &mode in &modes {
            for &n in &ns {
                for &big_n in &big_ns {
                    let point = ExperimentConfig {
                        n,
                        big_n,
                        mode,
                        target_accuracy: acc,
                        sweep: None,
                        ..config.clone()
                    };
                    point.validate()?;
                    out.push(point);
                }
            }
        }
    }
    Ok(out)
}

fn axis<T>(values: Vec<T>, base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values
    }
}

/// Run every grid point of the config's sweep and collect the result rows.
pub fn run_sweep(config: &ExperimentConfig, jobs: usize) -> Result<Vec<ResultRecord>> {
    let mut records = Vec::new();
    for point in sweep_configs(config)? {
        let report = run_experiment(point.clone(), jobs)?;
        records.extend(report.records(&point));
    }
    Ok(records)
}

/// A single calibration on given pools, as done outside of experiments.
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub score: String,
    pub method: String,
    pub n: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub threshold: Threshold,
    /// The labeled-only threshold, for comparison.
    pub standard_threshold: Threshold,
    /// Coverage-bias diagnostic; against the unlabeled true scores when the
    /// unlabeled file carries labels, else against the labeled scores.
    pub epsilon: Option<f64>,
}

/// Calibrate once on a labeled set plus optional unlabeled set.
pub fn calibrate_once(
    labeled: &ProbabilityDataset,
    unlabeled: Option<&ProbabilityDataset>,
    spec: &ScoreSpec,
    estimator: Estimator,
    alpha: f64,
    seed: u64,
) -> Result<CalibrationReport> {
    spec.validate()?;
    let lab = labeled.view();
    let labels = lab.require_labels()?;
    let mut r = rng::stream(seed, purpose::RANDOM_FACTOR);
    let mut draw = |len: usize| spec.randomized.then(|| (0..len).map(|_| r.random::<f64>()).collect::<Vec<_>>());
    let u_lab = draw(lab.len());
    let mut scorer = Scorer::new(*spec);
    let lab_scores = (0..lab.len())
        .map(|i| scorer.label(lab.probs(i), labels[i], u_lab.as_ref().map(|u| u[i])))
        .collect::<Result<Vec<_>>>()?;
    let standard_threshold = conformal_quantile(&lab_scores, alpha)?;

    let (unl_scores, epsilon, method) = match unlabeled {
        None => (Vec::new(), None, Method::Standard),
        Some(u) => {
            if u.num_classes() != labeled.num_classes() {
                return Err(Error::input("labeled and unlabeled sets disagree on the number of classes"));
            }
            let unl = u.view();
            let u_unl = draw(unl.len());
            let index = build_labeled_records(lab, spec)?;
            let mut rm = rng::stream(seed, purpose::RANDOM_MATCH);
            let est = estimator.estimate(unl, &index, spec, u_unl.as_deref(), &mut rm)?;
            let truth: Option<Vec<f64>> = (0..unl.len())
                .map(|i| unl.label(i).map(|y| scorer.label(unl.probs(i), y, u_unl.as_ref().map(|u| u[i]))))
                .collect::<Option<Result<Vec<_>>>>()
                .transpose()?;
            let pool = ScoredPool::new(lab_scores.clone(), est.clone())?;
            let t = semicp_threshold(&pool, alpha)?;
            let epsilon = if est.is_empty() {
                None
            } else {
                Some(epsilon_bias(truth.as_deref().unwrap_or(&lab_scores), &est, &t, lab.len(), est.len())?)
            };
            (est, epsilon, Method::SemiCp(estimator))
        }
    };
    let big_n = unl_scores.len();
    let threshold = semicp_threshold(&ScoredPool::new(lab_scores, unl_scores)?, alpha)?;
    Ok(CalibrationReport {
        score: spec.label(),
        method: method.to_string(),
        n: labeled.len(),
        big_n,
        threshold,
        standard_threshold,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SyntheticConfig;
    use crate::unlabeled::NeighborCriterion;

    fn small(n: usize, big_n: usize, signal: f64) -> ExperimentConfig {
        let data = SyntheticConfig {
            n_samples: 3000,
            signal,
            seed: 11,
            ..Default::default()
        };
        ExperimentConfig {
            trials: 20,
            base_seed: 5,
            ..ExperimentConfig::synthetic(data, n, big_n, 500)
        }
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let e = Experiment::prepare(small(30, 200, 3.0)).unwrap();
        let a = e.split(3);
        assert_eq!(a, e.split(3));
        assert_ne!(a, e.split(4));
        let mut all: Vec<usize> = a.labeled.iter().chain(&a.unlabeled).chain(&a.test).copied().collect();
        assert_eq!(all.len(), 730);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 730);
    }

    #[test]
    fn no_unlabeled_reduces_to_standard() {
        let e = Experiment::prepare(small(40, 0, 3.0)).unwrap();
        for t in 0..5 {
            let r = e.run_trial(0, t).unwrap();
            assert_eq!(r[0].coverage, r[1].coverage);
            assert_eq!(r[0].avg_size, r[1].avg_size);
            assert_eq!(r[1].coverage, r[2].coverage);
        }
    }

    #[test]
    fn perfect_classifier_semicp_matches_oracle() {
        // Accuracy 1 makes every pseudo-label correct, so NNM recovers the
        // true scores exactly.
        let mut cfg = small(20, 300, 40.0);
        cfg.scores = vec![ScoreSpec::thr(), ScoreSpec::aps()];
        let e = Experiment::prepare(cfg).unwrap();
        assert_eq!(e.accuracy(), 1.0);
        for s in 0..2 {
            for t in 0..5 {
                let r = e.run_trial(s, t).unwrap();
                assert_eq!(r[1].coverage, r[2].coverage);
                assert_eq!(r[1].avg_size, r[2].avg_size);
            }
        }
    }

    #[test]
    fn nnm_r_at_unit_factors_is_nnm() {
        // Randomized APS with all factors 1 is deterministic APS; compare the
        // estimators directly on one split.
        let e = Experiment::prepare(small(50, 200, 2.0)).unwrap();
        let plan = e.split(0);
        let lab = e.source(LABELED).subset(&plan.labeled);
        let unl = e.source(UNLABELED).subset(&plan.unlabeled);
        let spec = ScoreSpec::aps();
        let index = build_labeled_records(lab, &spec).unwrap();
        let mut r = rng::stream(0, 0);
        let ones = vec![1.0; unl.len()];
        let nnm = Estimator::Nnm(NeighborCriterion::nnm())
            .estimate(unl, &index, &spec, None, &mut r)
            .unwrap();
        let nnm_r = Estimator::NnmR(NeighborCriterion::nnm())
            .estimate(unl, &index, &spec.randomized(), Some(&ones), &mut r)
            .unwrap();
        assert_eq!(nnm, nnm_r);
    }

    #[test]
    fn single_labeled_point() {
        let mut cfg = small(1, 0, 3.0);
        cfg.methods = vec![Method::Standard];
        let r = run_experiment(cfg, 1).unwrap();
        // l = ceil(2 * 0.9) = 2 > 1, so every set holds all classes.
        let s = &r.methods[0].summary;
        assert_eq!(s.mean_coverage, 1.0);
        assert_eq!(s.mean_avg_size, 10.0);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = small(20, 200, 2.0);
        cfg.scores = vec![ScoreSpec::aps().randomized()];
        cfg.methods = vec![
            Method::Standard,
            "semicp:random_match".parse().unwrap(),
            "semicp:nnm_r".parse().unwrap(),
            Method::Oracle,
        ];
        let one = run_experiment(cfg.clone(), 1).unwrap();
        let eight = run_experiment(cfg.clone(), 8).unwrap();
        let bytes = |r: &ExperimentReport| serde_json::to_vec(&r.records(&cfg)).unwrap();
        assert_eq!(bytes(&one), bytes(&eight));
        for (a, b) in one.methods.iter().zip(&eight.methods) {
            assert_eq!(a.trials, b.trials);
        }
    }

    #[test]
    fn conditional_modes_report_groups() {
        for mode in ["group_conditional:3", "class_conditional", "clustercp:2"] {
            let mut cfg = small(100, 300, 2.0);
            cfg.mode = mode.parse().unwrap();
            cfg.trials = 4;
            let r = run_experiment(cfg, 2).unwrap();
            for m in &r.methods {
                let g = m.summary.group_coverage.as_ref().unwrap();
                let expected = if mode.starts_with("group") { 3 } else { 10 };
                assert_eq!(g.len(), expected, "{mode}");
                assert!(m.summary.group_cov_gap.is_some());
            }
        }
    }

    #[test]
    fn improvement_is_relative_to_standard_and_oracle() {
        let r = run_experiment(small(10, 500, 2.0), 2).unwrap();
        let std = r.method(Method::Standard).unwrap();
        let oracle = r.method(Method::Oracle).unwrap();
        if std.summary.cov_gap != oracle.summary.cov_gap {
            assert_eq!(std.improvement, Some(0.0));
            assert!((oracle.improvement.unwrap() - 100.0).abs() < 1e-9);
        }
        assert!(r.method(Method::semicp()).unwrap().summary.mean_epsilon.is_some());
    }

    #[test]
    fn infeasible_split_is_a_config_error() {
        let cfg = small(2000, 2000, 3.0);
        assert!(Experiment::prepare(cfg).unwrap_err().is_config());
    }

    #[test]
    fn sweep_grid() {
        let mut cfg = small(10, 100, 3.0);
        cfg.sweep = Some(SweepSpec {
            n: vec![10, 20],
            big_n: vec![0, 100, 200],
            ..Default::default()
        });
        let points = sweep_configs(&cfg).unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!((points[0].n, points[0].big_n), (10, 0));
        assert_eq!((points[5].n, points[5].big_n), (20, 200));
    }

    #[test]
    fn one_shot_calibration() {
        let data = generate_synthetic(&SyntheticConfig {
            n_samples: 400,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let rows_l: Vec<usize> = (0..100).collect();
        let rows_u: Vec<usize> = (100..400).collect();
        let pick = |rows: &[usize]| {
            let probs = rows.iter().flat_map(|&r| data.probs(r).values().to_vec()).collect();
            let labels = rows.iter().map(|&r| data.label(r)).collect();
            ProbabilityDataset::new(10, probs, labels).unwrap()
        };
        let (l, u) = (pick(&rows_l), pick(&rows_u));
        let est = Estimator::Nnm(NeighborCriterion::nnm());
        let with_truth = calibrate_once(&l, Some(&u), &ScoreSpec::thr(), est, 0.1, 0).unwrap();
        assert_eq!(with_truth.big_n, 300);
        assert_eq!(with_truth.threshold.pool_size, 400);
        assert!(with_truth.epsilon.is_some());
        let alone = calibrate_once(&l, None, &ScoreSpec::thr(), est, 0.1, 0).unwrap();
        assert_eq!(alone.threshold, alone.standard_threshold);
        assert_eq!(alone.epsilon, None);
        let hidden = calibrate_once(&l, Some(&u.without_labels()), &ScoreSpec::thr(), est, 0.1, 0).unwrap();
        assert_eq!(hidden.threshold, with_truth.threshold);
    }
}
