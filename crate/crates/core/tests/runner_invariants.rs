use semicp::{
    load_dataset, run_experiment, save_dataset, CalibrationMode, DataSource, ExperimentConfig, Method, ScoreSpec,
    SyntheticConfig,
};

fn config(n: usize, big_n: usize, trials: usize) -> ExperimentConfig {
    let data = SyntheticConfig {
        n_samples: 20_000,
        seed: 17,
        ..Default::default()
    };
    ExperimentConfig {
        trials,
        base_seed: 170,
        target_accuracy: Some(0.8),
        ..ExperimentConfig::synthetic(data, n, big_n, 1000)
    }
}

#[test]
fn standard_gap_shrinks_with_labeled_size() {
    let mut gaps = Vec::new();
    for n in [10, 20, 50, 100] {
        let mut cfg = config(n, 0, 1000);
        cfg.methods = vec![Method::Standard];
        gaps.push(run_experiment(cfg, 0).unwrap().methods[0].summary.cov_gap);
    }
    assert!(gaps.windows(2).all(|w| w[0] > w[1]), "{gaps:?}");
}

#[test]
fn naive_pseudo_scores_undercover() {
    let mut cfg = config(20, 2000, 300);
    cfg.scores = vec![ScoreSpec::thr(), ScoreSpec::aps(), ScoreSpec::raps(2, 0.01)];
    cfg.methods = vec!["semicp:naive".parse().unwrap()];
    let r = run_experiment(cfg, 0).unwrap();
    for m in &r.methods {
        assert!(m.summary.mean_coverage < 0.89, "{} {}", m.score.label(), m.summary.mean_coverage);
    }
}

#[test]
fn oracle_gap_is_small_and_ordered() {
    let mut cfg = config(20, 4000, 300);
    cfg.scores = vec![ScoreSpec::aps()];
    cfg.methods = vec![Method::Standard, Method::semicp(), Method::Oracle];
    let r = run_experiment(cfg, 0).unwrap();
    let gap = |m| r.method(m).unwrap().summary.cov_gap;
    assert!(gap(Method::Oracle) < 1.5);
    assert!(gap(Method::Oracle) < gap(Method::semicp()));
    assert!(gap(Method::semicp()) < gap(Method::Standard));
    let imp = r.method(Method::semicp()).unwrap().improvement.unwrap();
    assert!(imp > 0.0 && imp < 100.0);
}

#[test]
fn class_conditional_reports_every_class() {
    let mut cfg = config(200, 1000, 50);
    cfg.mode = CalibrationMode::ClassConditional;
    cfg.methods = vec![Method::Standard, Method::semicp()];
    let r = run_experiment(cfg, 0).unwrap();
    for m in &r.methods {
        let groups = m.summary.group_coverage.as_ref().unwrap();
        assert_eq!(groups.len(), 10);
        assert!(m.summary.group_cov_gap.is_some());
    }
}

#[test]
fn file_source_matches_synthetic_source() {
    let synth = config(30, 500, 20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.csv");
    let DataSource::Synthetic(data) = &synth.data else {
        unreachable!()
    };
    // Regenerate the calibrated pool and feed it back through a file.
    let cal = semicp::calibrate_signal_for_accuracy(0.8, data, semicp::SignalCalibration::DEFAULT_TOLERANCE).unwrap();
    let pool = semicp::generate_synthetic(&SyntheticConfig {
        signal: cal.signal,
        ..data.clone()
    })
    .unwrap();
    save_dataset(&pool, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap().len(), pool.len());

    let mut from_file = synth.clone();
    from_file.data = DataSource::File { path };
    from_file.target_accuracy = None;
    let a = run_experiment(synth, 1).unwrap();
    let b = run_experiment(from_file, 1).unwrap();
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.summary.cov_gap, y.summary.cov_gap);
        assert_eq!(x.summary.mean_avg_size, y.summary.mean_avg_size);
    }
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = config(20, 2000, 10);
    cfg.mode = CalibrationMode::ClusterCp {
        clusters: 3,
        min_class_count: 5,
    };
    cfg.methods = vec![Method::Standard, "semicp:knnm3".parse().unwrap(), Method::Oracle];
    let text = cfg.to_toml_string().unwrap();
    let back = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(back.to_toml_string().unwrap(), text);
}
