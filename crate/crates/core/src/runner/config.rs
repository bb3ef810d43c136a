//! Experiment configuration (`v1` TOML schema).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::check_alpha;
use crate::datagen::SyntheticConfig;
use crate::error::{Error, Result};
use crate::scores::ScoreSpec;
use crate::unlabeled::{Estimator, NeighborCriterion, NeighborKind};

pub const CONFIG_VERSION: &str = "v1";

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// One generated dataset feeding all three pools.
    Synthetic(SyntheticConfig),
    /// One labeled file feeding all three pools.
    File { path: PathBuf },
    /// Separate files per pool. Pools naming the same file draw disjoint
    /// rows; a labeled file different from the others models a shifted
    /// labeled domain.
    Files {
        labeled: PathBuf,
        unlabeled: PathBuf,
        test: PathBuf,
    },
}

/// A compared method. Parsed from `standard`, `oracle`, `semicp` (NNM) or
/// `semicp:<estimator>` with estimators `nnm`, `nnm_r`, `knnm<k>`,
/// `knnm_r<k>`, `naive`, `debias`, `random_match`, or
/// `nnm_<criterion>` for criteria `confidence`, `score_vector`, `logit`,
/// `feature`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Standard,
    Oracle,
    SemiCp(Estimator),
}

impl Method {
    pub fn semicp() -> Self {
        Method::SemiCp(Estimator::Nnm(NeighborCriterion::nnm()))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Standard => f.write_str("standard"),
            Method::Oracle => f.write_str("oracle"),
            Method::SemiCp(e) => write!(f, "semicp:{}", e.tag()),
        }
    }
}

fn parse_estimator(s: &str) -> Option<Estimator> {
    let criterion = |kind| NeighborCriterion::by(kind);
    Some(match s {
        "nnm" => Estimator::Nnm(NeighborCriterion::nnm()),
        "nnm_r" => Estimator::NnmR(NeighborCriterion::nnm()),
        "naive" => Estimator::Naive,
        "debias" => Estimator::Debias,
        "random_match" | "rm" => Estimator::RandomMatch,
        "nnm_confidence" => Estimator::Nnm(criterion(NeighborKind::Confidence)),
        "nnm_score_vector" => Estimator::Nnm(criterion(NeighborKind::ScoreVector)),
        "nnm_logit" => Estimator::Nnm(criterion(NeighborKind::Logit)),
        "nnm_feature" => Estimator::Nnm(criterion(NeighborKind::Feature)),
        _ => {
            if let Some(k) = s.strip_prefix("knnm_r") {
                Estimator::NnmR(NeighborCriterion::k_nearest(k.parse().ok().filter(|&k| k > 0)?))
            } else {
                let k = s.strip_prefix("knnm")?;
                Estimator::Nnm(NeighborCriterion::k_nearest(k.parse().ok().filter(|&k| k > 0)?))
            }
        }
    })
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "standard" => Ok(Method::Standard),
            "oracle" => Ok(Method::Oracle),
            "semicp" => Ok(Method::semicp()),
            other => other
                .strip_prefix("semicp:")
                .and_then(parse_estimator)
                .map(Method::SemiCp)
                .ok_or_else(|| Error::config(format!("unknown method `{other}`"))),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// How thresholds are formed. Parsed from `marginal`, `interpolation`,
/// `group_conditional:<groups>`, `class_conditional`, or
/// `clustercp:<clusters>[:<min_class_count>]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CalibrationMode {
    Marginal,
    Interpolation,
    /// Groups are k-means clusters of the feature vectors.
    GroupConditional { groups: usize },
    ClassConditional,
    ClusterCp { clusters: usize, min_class_count: usize },
}

impl CalibrationMode {
    pub const DEFAULT_MIN_CLASS_COUNT: usize = 5;
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationMode::Marginal => f.write_str("marginal"),
            CalibrationMode::Interpolation => f.write_str("interpolation"),
            CalibrationMode::GroupConditional { groups } => write!(f, "group_conditional:{groups}"),
            CalibrationMode::ClassConditional => f.write_str("class_conditional"),
            CalibrationMode::ClusterCp {
                clusters,
                min_class_count,
            } => write!(f, "clustercp:{clusters}:{min_class_count}"),
        }
    }
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::config(format!("unknown calibration mode `{s}`"));
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let nums: Vec<usize> = parts.map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let positive = |v: usize| if v == 0 { Err(bad()) } else { Ok(v) };
        match (head, nums.as_slice()) {
            ("marginal", []) => Ok(CalibrationMode::Marginal),
            ("interpolation", []) => Ok(CalibrationMode::Interpolation),
            ("class_conditional", []) => Ok(CalibrationMode::ClassConditional),
            ("group_conditional", [g]) => Ok(CalibrationMode::GroupConditional { groups: positive(*g)? }),
            ("clustercp", [k]) => Ok(CalibrationMode::ClusterCp {
                clusters: positive(*k)?,
                min_class_count: Self::DEFAULT_MIN_CLASS_COUNT,
            }),
            ("clustercp", [k, m]) => Ok(CalibrationMode::ClusterCp {
                clusters: positive(*k)?,
                min_class_count: *m,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for CalibrationMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CalibrationMode> for String {
    fn from(m: CalibrationMode) -> String {
        m.to_string()
    }
}

/// Grid axes for `sweep`. Empty axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub n: Vec<usize>,
    #[serde(rename = "N")]
    pub big_n: Vec<usize>,
    /// Target top-1 accuracies (synthetic sources only).
    pub accuracy: Vec<f64>,
    pub mode: Vec<CalibrationMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: String,
    pub data: DataSource,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_scores")]
    pub scores: Vec<ScoreSpec>,
    /// Labeled calibration points per trial.
    pub n: usize,
    /// Unlabeled calibration points per trial.
    #[serde(rename = "N", default)]
    pub big_n: usize,
    pub test_size: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_mode")]
    pub mode: CalibrationMode,
    #[serde(default)]
    pub base_seed: u64,
    /// For synthetic data: tune the signal to reach this top-1 accuracy.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_version() -> String {
    CONFIG_VERSION.to_string()
}

fn default_alpha() -> f64 {
    0.1
}

fn default_scores() -> Vec<ScoreSpec> {
    vec![ScoreSpec::thr()]
}

fn default_trials() -> usize {
    1000
}

fn default_methods() -> Vec<Method> {
    vec![Method::Standard, Method::semicp(), Method::Oracle]
}

fn default_mode() -> CalibrationMode {
    CalibrationMode::Marginal
}

impl ExperimentConfig {
    /// A marginal Standard/SemiCP/Oracle comparison on synthetic data.
    pub fn synthetic(data: SyntheticConfig, n: usize, big_n: usize, test_size: usize) -> Self {
        Self {
            version: default_version(),
            data: DataSource::Synthetic(data),
            alpha: default_alpha(),
            scores: default_scores(),
            n,
            big_n,
            test_size,
            trials: default_trials(),
            methods: default_methods(),
            mode: default_mode(),
            base_seed: 0,
            target_accuracy: None,
            sweep: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file. Relative data paths resolve against the file's
    /// directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Synthetic(_) => {}
            DataSource::File { path } => fix(path),
            DataSource::Files { labeled, unlabeled, test } => {
                fix(labeled);
                fix(unlabeled);
                fix(test);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version `{}`, expected `{CONFIG_VERSION}`",
                self.version
            )));
        }
        check_alpha(self.alpha)?;
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.test_size == 0 {
            return Err(Error::config("test_size must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        if self.scores.is_empty() {
            return Err(Error::config("no score functions selected"));
        }
        for spec in &self.scores {
            spec.validate()?;
            for m in &self.methods {
                if let Method::SemiCp(Estimator::NnmR(_)) = m {
                    if !spec.randomized {
                        return Err(Error::config(format!(
                            "method {m} needs a randomized score, got {}",
                            spec.label()
                        )));
                    }
                }
                if let Method::SemiCp(Estimator::Nnm(c) | Estimator::NnmR(c)) = m {
                    if c.k > self.n {
                        return Err(Error::config(format!("method {m} needs at least {} labeled points", c.k)));
                    }
                }
            }
        }
        if let Some(acc) = self.target_accuracy {
            if !matches!(self.data, DataSource::Synthetic(_)) {
                return Err(Error::config("target_accuracy applies to synthetic data only"));
            }
            if !(acc > 0.0 && acc < 1.0) {
                return Err(Error::config("target_accuracy must lie in (0, 1)"));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }
}
