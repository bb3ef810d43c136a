use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::Rng as _;
use semicp::io::write_results_to;
use semicp::rng::{self, purpose};
use semicp::{
    calibrate_once, calibrate_signal_for_accuracy, generate_synthetic, load_dataset, run_experiment, run_sweep,
    save_dataset, CalibrationMode, Error, ExperimentConfig, Method, ResultsFile, ResultsFormat, ScoreKind, ScoreSpec,
    Scorer, SignalCalibration, SyntheticConfig, ThresholdValue,
};

/// Semi-supervised conformal prediction.
#[derive(Debug, Parser)]
#[command(name = "semicp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Base seed (overrides the config's `base_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset as CSV.
    Gen(GenArgs),
    /// Compute a threshold from a labeled file and an optional unlabeled file.
    Calibrate(CalibrateArgs),
    /// Prediction sets for a test file under a threshold.
    Predict(PredictArgs),
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Run every grid point of a config's `[sweep]` table.
    Sweep(RunArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 3.0)]
    signal: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Tune the signal to reach this top-1 accuracy instead.
    #[arg(long)]
    accuracy: Option<f64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long, default_value = "thr")]
    score: ScoreKind,
    #[arg(long)]
    randomized: bool,
    #[arg(long, default_value_t = ScoreSpec::DEFAULT_K_REG)]
    k_reg: usize,
    #[arg(long, default_value_t = ScoreSpec::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = ScoreSpec::DEFAULT_SAPS_WEIGHT)]
    weight: f64,
}

impl ScoreArgs {
    fn spec(&self) -> ScoreSpec {
        ScoreSpec {
            kind: self.score,
            k_reg: self.k_reg,
            lambda: self.lambda,
            weight: self.weight,
            randomized: self.randomized,
        }
    }
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreArgs,
    /// Estimator for unlabeled scores, as in config `methods`.
    #[arg(long, default_value = "semicp:nnm")]
    method: Method,
    #[arg(long, default_value_t = 0.1, value_parser = parse_alpha)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    test: PathBuf,
    /// Threshold JSON written by `calibrate`.
    #[arg(long, conflicts_with = "value", required_unless_present = "value")]
    threshold: Option<PathBuf>,
    /// Literal threshold (a number or INCLUDE_ALL).
    #[arg(long)]
    value: Option<String>,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML, schema v1).
    config: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "big-n")]
    big_n: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    mode: Option<CalibrationMode>,
    /// Replace the config's methods (repeatable).
    #[arg(long = "method")]
    methods: Vec<Method>,
    /// Results format; guessed from `--out` when omitted.
    #[arg(long)]
    format: Option<Format>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

fn output(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn gen(cli: &Cli, args: &GenArgs) -> anyhow::Result<()> {
    let mut cfg = SyntheticConfig {
        num_classes: args.classes,
        n_samples: args.samples,
        signal: args.signal,
        noise_sigma: args.noise_sigma,
        temperature: args.temperature,
        prior: Vec::new(),
        seed: cli.seed.unwrap_or(0),
    };
    if let Some(acc) = args.accuracy {
        let cal = calibrate_signal_for_accuracy(acc, &cfg, SignalCalibration::DEFAULT_TOLERANCE)?;
        eprintln!("signal {:.6} gives accuracy {:.4}", cal.signal, cal.achieved_accuracy);
        cfg.signal = cal.signal;
    }
    let data = generate_synthetic(&cfg)?;
    match &cli.out {
        Some(p) => save_dataset(&data, p)?,
        None => {
            let mut out = output(&None)?;
            semicp::io::write_dataset(&data, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn calibrate(cli: &Cli, args: &CalibrateArgs) -> anyhow::Result<()> {
    let Method::SemiCp(estimator) = args.method else {
        bail!(Error::Config(format!("`{}` is not an unlabeled-score estimator", args.method)));
    };
    let labeled = load_dataset(&args.labeled)?;
    let unlabeled = args.unlabeled.as_ref().map(load_dataset).transpose()?;
    let report = calibrate_once(
        &labeled,
        unlabeled.as_ref(),
        &args.score.spec(),
        estimator,
        args.alpha,
        cli.seed.unwrap_or(0),
    )?;
    let mut out = output(&cli.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read_threshold(path: &Path, spec: &ScoreSpec) -> anyhow::Result<ThresholdValue> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    if let Some(score) = doc.get("score").and_then(|s| s.as_str()) {
        if score != spec.label() {
            bail!(Error::Config(format!(
                "threshold was calibrated for score `{score}`, not `{}`",
                spec.label()
            )));
        }
    }
    let value = doc
        .pointer("/threshold/value")
        .cloned()
        .ok_or_else(|| Error::Input(format!("{}: no threshold.value", path.display())))?;
    Ok(serde_json::from_value(value).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?)
}

fn predict(cli: &Cli, args: &PredictArgs) -> anyhow::Result<()> {
    let spec = args.score.spec();
    spec.validate()?;
    let threshold = match (&args.threshold, &args.value) {
        (Some(p), _) => read_threshold(p, &spec)?,
        (None, Some(v)) => serde_json::from_str(v)
            .or_else(|_| serde_json::from_value(serde_json::Value::String(v.clone())))
            .map_err(|_| Error::Config(format!("bad threshold `{v}`")))?,
        (None, None) => unreachable!("clap requires one"),
    };
    let data = load_dataset(&args.test)?;
    let mut u_rng = rng::stream(cli.seed.unwrap_or(0), purpose::RANDOM_FACTOR);
    let mut scorer = Scorer::new(spec);
    let mut out = output(&cli.out)?;
    writeln!(out, "row,label,size,set")?;
    let (mut covered, mut labeled, mut total_size) = (0usize, 0usize, 0usize);
    for row in 0..data.len() {
        let u = spec.randomized.then(|| u_rng.random::<f64>());
        let scores = scorer.all_labels(data.probs(row), u)?;
        let set: Vec<usize> = (0..scores.len()).filter(|&y| threshold.admits(scores[y])).collect();
        total_size += set.len();
        let label = data.label(row);
        if let Some(y) = label {
            labeled += 1;
            covered += usize::from(set.contains(&y));
        }
        let set_text: Vec<String> = set.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{row},{},{},{}",
            label.map(|y| y.to_string()).unwrap_or_default(),
            set.len(),
            set_text.join(" ")
        )?;
    }
    out.flush()?;
    if !data.is_empty() {
        eprintln!("average set size {:.4}", total_size as f64 / data.len() as f64);
    }
    if labeled > 0 {
        eprintln!("coverage {:.4} over {labeled} labeled rows", covered as f64 / labeled as f64);
    }
    Ok(())
}

fn load_config(cli: &Cli, args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(n) = args.big_n {
        cfg.big_n = n;
    }
    if let Some(t) = args.test_size {
        cfg.test_size = t;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if !args.methods.is_empty() {
        cfg.methods = args.methods.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_records(cli: &Cli, format: Option<Format>, records: Vec<semicp::ResultRecord>) -> anyhow::Result<()> {
    let format = match (format, &cli.out) {
        (Some(Format::Json), _) => ResultsFormat::Json,
        (Some(Format::Csv), _) => ResultsFormat::Csv,
        (None, Some(p)) => ResultsFormat::from_path(p),
        (None, None) => ResultsFormat::Json,
    };
    let mut out = output(&cli.out)?;
    write_results_to(&ResultsFile::new(records), format, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run(cli: &Cli, args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli, args)?;
    let report = run_experiment(cfg.clone(), cli.jobs)?;
    for m in &report.methods {
        eprintln!(
            "{:<22} {:<7} coverage {:.4}  cov_gap {:.3}  size {:.3}{}",
            m.method.to_string(),
            m.score.label(),
            m.summary.mean_coverage,
            m.summary.cov_gap,
            m.summary.mean_avg_size,
            m.improvement.map(|i| format!("  improvement {i:.1}%")).unwrap_or_default()
        );
    }
    write_records(cli, args.format, report.records(&cfg))
}

fn sweep(cli: &Cli, args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_config(cli, args)?;
    if cfg.sweep.is_none() {
        bail!(Error::Config("config has no [sweep] table".into()));
    }
    let records = run_sweep(&cfg, cli.jobs)?;
    eprintln!("{} result rows", records.len());
    write_records(cli, args.format, records)
}

/// 2 for configuration problems, 3 for bad data, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                e if e.is_config() => 2,
                Error::Convergence { .. } => 1,
                Error::Trial { source, .. } if matches!(**source, Error::Convergence { .. }) => 1,
                _ => 3,
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(&cli, a),
        Command::Calibrate(a) => calibrate(&cli, a),
        Command::Predict(a) => predict(&cli, a),
        Command::Run(a) => run(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
