//! Semi-supervised conformal prediction.
//!
//! Split conformal calibration with few labeled points is noisy. SemiCP
//! adds unlabeled points to the calibration pool, estimating their
//! nonconformity scores by nearest-neighbor matching (NNM) against the
//! labeled set: an unlabeled point's score under its pseudo-label is
//! corrected by the pseudo-vs-true bias of the labeled point whose pseudo
//! score is closest.
//!
//! ```
//! use semicp::{build_labeled_records, nnm_scores, semicp_threshold, NeighborCriterion, ProbabilityDataset,
//!              ScoreSpec, ScoredPool, Scorer};
//!
//! let labeled = ProbabilityDataset::new(2, vec![0.9, 0.1, 0.3, 0.7, 0.6, 0.4], vec![Some(0), Some(1), Some(1)])?;
//! let unlabeled = ProbabilityDataset::new(2, vec![0.8, 0.2, 0.55, 0.45], vec![None, None])?;
//! let spec = ScoreSpec::thr();
//!
//! let mut scorer = Scorer::new(spec);
//! let lab_scores = (0..3)
//!     .map(|i| scorer.label(labeled.probs(i), labeled.label(i).unwrap(), None))
//!     .collect::<Result<Vec<_>, _>>()?;
//! let index = build_labeled_records(labeled.view(), &spec)?;
//! let est = nnm_scores(unlabeled.view(), &index, &NeighborCriterion::nnm())?;
//! let t = semicp_threshold(&ScoredPool::new(lab_scores, est)?, 0.2)?;
//! assert_eq!(t.pool_size, 5);
//! # Ok::<(), semicp::Error>(())
//! ```

pub mod calibration;
pub mod cluster;
pub mod data;
pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod runner;
pub mod scores;
pub mod unlabeled;

pub use calibration::{
    clustercp_thresholds, conditional_thresholds, conformal_level, conformal_quantile, epsilon_bias,
    interpolated_quantile, predict_set, semicp_threshold, ClassThresholds, ClusterSettings, GroupAssignment,
    GroupThresholds, PredictionSet, ScoredPool, Threshold, ThresholdValue,
};
pub use data::{Channel, ProbVector, ProbabilityDataset, Subset};
pub use datagen::{calibrate_signal_for_accuracy, generate_synthetic, measure_top1_accuracy, SignalCalibration, SyntheticConfig};
pub use error::{Error, Result};
pub use io::{load_dataset, save_dataset, write_results, ResultRecord, ResultsFile, ResultsFormat};
pub use metrics::{MetricsSummary, TrialResult};
pub use runner::{
    calibrate_once, run_experiment, run_sweep, run_trial, CalibrationMode, CalibrationReport, DataSource, Experiment,
    ExperimentConfig, ExperimentReport, Method, MethodReport, SplitPlan, SweepSpec,
};
pub use scores::{score_all_labels, score_label, ScoreKind, ScoreSpec, Scorer};
pub use unlabeled::{
    build_labeled_records, debias_scores, naive_scores, nnm_r_scores, nnm_scores, pseudo_label, random_match_scores,
    Estimator, LabeledIndex, LabeledScoreRecord, NeighborCriterion, NeighborKind,
};
