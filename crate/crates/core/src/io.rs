//! Dataset files and result files.
//!
//! Dataset CSV layout:
//!
//! ```text
//! #semicp,v1,K=<classes>,features=<dim>
//! label,p_0,...,p_{K-1}[,z_0,...,z_{K-1}][,f_0,...,f_{D-1}]
//! <label>,<p...>[,<z...>][,<f...>]
//! ```
//!
//! `label` is `-1` for unlabeled rows. The probability columns may be
//! omitted when logits are present; probabilities are then the softmax of
//! the logits. Floats are written with 17 significant digits, so a
//! save/load round trip is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{softmax_into, validate_row, Channel, ProbabilityDataset};
use crate::error::{Error, Result};
use crate::metrics::HISTOGRAM_BINS;

const MAGIC: &str = "#semicp";
const VERSION: &str = "v1";

/// Which columns a dataset file carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetFileHeader {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub has_probs: bool,
    pub has_logits: bool,
}

/// Format a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_preamble(line: &str) -> std::result::Result<(usize, usize), String> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 4 || fields[0] != MAGIC {
        return Err(format!("expected `{MAGIC},{VERSION},K=<int>,features=<int>`"));
    }
    if fields[1] != VERSION {
        return Err(format!("unsupported version `{}`", fields[1]));
    }
    let num = |field: &str, key: &str| -> std::result::Result<usize, String> {
        field
            .strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("malformed `{field}`, expected {key}<int>"))
    };
    Ok((num(fields[2], "K=")?, num(fields[3], "features=")?))
}

fn expected_columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}_{j}")).collect()
}

fn parse_header(cols: &csv::StringRecord, k: usize, d: usize) -> std::result::Result<DatasetFileHeader, String> {
    let cols: Vec<&str> = cols.iter().map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err("first column must be `label`".into());
    }
    let mut rest = &cols[1..];
    let mut take = |prefix: &str, n: usize| -> bool {
        let want = expected_columns(prefix, n);
        if n > 0 && rest.len() >= n && rest[..n].iter().zip(&want).all(|(a, b)| *a == b) {
            rest = &rest[n..];
            true
        } else {
            false
        }
    };
    let has_probs = take("p", k);
    let has_logits = take("z", k);
    let has_features = take("f", d);
    if !rest.is_empty() {
        return Err(format!("unexpected column `{}`", rest[0]));
    }
    if !has_probs && !has_logits {
        return Err("need probability columns p_0.. or logit columns z_0..".into());
    }
    if d > 0 && !has_features {
        return Err(format!("header declares {d} features but has no f_0..f_{} columns", d - 1));
    }
    Ok(DatasetFileHeader {
        num_classes: k,
        feature_dim: d,
        has_probs,
        has_logits,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ProbabilityDataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_dataset(BufReader::new(file), path)
}

/// Parse a dataset from any reader; `path` is only used in error messages.
pub fn read_dataset<R: Read>(reader: R, path: &Path) -> Result<ProbabilityDataset> {
    let data_err = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = BufReader::new(reader);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let (k, d) = parse_preamble(&first).map_err(|m| data_err(1, m))?;
    if k < 2 {
        return Err(data_err(1, format!("K must be at least 2, got {k}")));
    }

    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = csv.headers().map_err(|e| data_err(2, e.to_string()))?.clone();
    let header = parse_header(&header, k, d).map_err(|m| data_err(2, m))?;
    let width = 1 + if header.has_probs { k } else { 0 } + if header.has_logits { k } else { 0 } + d;

    let mut labels = Vec::new();
    let mut probs = Vec::new();
    let mut logits = Vec::new();
    let mut features = Vec::new();
    let mut values = Vec::with_capacity(width);
    for (row, record) in csv.records().enumerate() {
        // Line numbers count the preamble and the header.
        let line = row + 3;
        let record = record.map_err(|e| data_err(line, e.to_string()))?;
        if record.len() != width {
            return Err(data_err(line, format!("expected {width} columns, found {}", record.len())));
        }
        let label: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| data_err(line, format!("bad label `{}`", &record[0])))?;
        labels.push(match label {
            -1 => None,
            y if y >= 0 && (y as usize) < k => Some(y as usize),
            y => return Err(data_err(line, format!("label {y} outside {{-1, 0..{}}}", k - 1))),
        });
        values.clear();
        for (c, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| data_err(line, format!("column {c}: bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(data_err(line, format!("column {c}: non-finite value")));
            }
            values.push(v);
        }
        let mut at = 0;
        if header.has_probs {
            let p = &values[..k];
            validate_row(p).map_err(|m| data_err(line, format!("row {row}: {m}")))?;
            probs.extend_from_slice(p);
            at = k;
        }
        if header.has_logits {
            logits.extend_from_slice(&values[at..at + k]);
            at += k;
        }
        features.extend_from_slice(&values[at..at + d]);
    }

    if !header.has_probs {
        probs = vec![0.0; logits.len()];
        for (z, p) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            softmax_into(z, 1.0, p);
        }
    }
    let mut data = ProbabilityDataset::new(k, probs, labels)?;
    if header.has_logits {
        data = data.with_logits(logits)?;
    }
    if d > 0 {
        data = data.with_features(d, features)?;
    }
    Ok(data)
}

pub fn save_dataset(data: &ProbabilityDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(data, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(data: &ProbabilityDataset, out: &mut W) -> Result<()> {
    let k = data.num_classes();
    let d = data.feature_dim();
    let has_logits = data.has_channel(Channel::Logits);
    writeln!(out, "{MAGIC},{VERSION},K={k},features={d}")?;
    let mut header = vec!["label".to_string()];
    header.extend(expected_columns("p", k));
    if has_logits {
        header.extend(expected_columns("z", k));
    }
    header.extend(expected_columns("f", d));
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..data.len() {
        line.clear();
        match data.label(i) {
            Some(y) => line.push_str(&y.to_string()),
            None => line.push_str("-1"),
        }
        let mut push_all = |vals: &[f64]| {
            for &v in vals {
                line.push(',');
                line.push_str(&fmt_f64(v));
            }
        };
        push_all(data.probs(i).values());
        if let Some(z) = data.logits(i) {
            push_all(z);
        }
        if let Some(f) = data.features(i) {
            push_all(f);
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Schema tag of result files.
pub const RESULTS_SCHEMA: &str = "semicp-results/v1";

/// One method's aggregate over an experiment (one row of a results file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub score: String,
    pub mode: String,
    pub n: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub alpha: f64,
    pub trials: usize,
    pub cov_gap: f64,
    pub over_cov_gap: f64,
    pub under_cov_gap: f64,
    pub avg_size: f64,
    /// Share of the Standard-to-Oracle coverage-gap difference closed, in
    /// percent; `null` when undefined.
    pub improvement: Option<f64>,
    pub histogram: Vec<u64>,
    pub mean_coverage: f64,
    pub group_cov_gap: Option<f64>,
    pub group_coverage: Option<Vec<Option<f64>>>,
    pub mean_epsilon: Option<f64>,
    /// Measured top-1 accuracy of the data source.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema: String,
    pub results: Vec<ResultRecord>,
}

impl ResultsFile {
    pub fn new(results: Vec<ResultRecord>) -> Self {
        Self {
            schema: RESULTS_SCHEMA.to_string(),
            results,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultsFormat {
    Json,
    Csv,
}

impl ResultsFormat {
    /// Guess from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ResultsFormat::Csv,
            _ => ResultsFormat::Json,
        }
    }
}

/// Column order of CSV result files.
pub fn results_csv_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "method",
        "score",
        "mode",
        "n",
        "N",
        "alpha",
        "trials",
        "cov_gap",
        "over_cov_gap",
        "under_cov_gap",
        "avg_size",
        "improvement",
        "mean_coverage",
        "group_cov_gap",
        "mean_epsilon",
        "accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(expected_columns("h", HISTOGRAM_BINS));
    cols
}

pub fn write_results_to<W: Write>(results: &ResultsFile, format: ResultsFormat, out: W) -> Result<()> {
    match format {
        ResultsFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, results)?;
            writeln!(out)?;
        }
        ResultsFormat::Csv => {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            let mut w = csv::Writer::from_writer(out);
            w.write_record(results_csv_columns()).map_err(csv_err)?;
            for r in &results.results {
                let mut row = vec![
                    r.method.clone(),
                    r.score.clone(),
                    r.mode.clone(),
                    r.n.to_string(),
                    r.big_n.to_string(),
                    fmt_f64(r.alpha),
                    r.trials.to_string(),
                    fmt_f64(r.cov_gap),
                    fmt_f64(r.over_cov_gap),
                    fmt_f64(r.under_cov_gap),
                    fmt_f64(r.avg_size),
                    opt(r.improvement),
                    fmt_f64(r.mean_coverage),
                    opt(r.group_cov_gap),
                    opt(r.mean_epsilon),
                    opt(r.accuracy),
                ];
                row.extend(r.histogram.iter().map(u64::to_string));
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Input(format!("{other:?}")),
    }
}

pub fn write_results(results: &ResultsFile, path: impl AsRef<Path>, format: ResultsFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_results_to(results, format, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_results_json(path: impl AsRef<Path>) -> Result<ResultsFile> {
    let file = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ProbabilityDataset> {
        read_dataset(text.as_bytes(), Path::new("mem.csv"))
    }

    fn toy() -> ProbabilityDataset {
        ProbabilityDataset::new(2, vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0], vec![Some(1), None]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = toy();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, d);

        let with = toy()
            .with_logits(vec![0.5, -1.25, 1e-300, 3.0])
            .unwrap()
            .with_features(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, std::f64::consts::PI])
            .unwrap();
        let mut buf = Vec::new();
        write_dataset(&with, &mut buf).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), with);
    }

    #[test]
    fn rejects_bad_probability_row() {
        let err = parse("#semicp,v1,K=2,features=0\nlabel,p_0,p_1\n0,0.5,0.5\n1,0.5,0.4\n").unwrap_err();
        match err {
            Error::Data { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("row 1"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn logits_only_file() {
        let d = parse("#semicp,v1,K=3,features=0\nlabel,z_0,z_1,z_2\n2,1.0,2.0,3.0\n").unwrap();
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (p, zj) in d.probs(0).values().iter().zip(z) {
            assert!((p - zj.exp() / denom).abs() < 1e-15);
        }
        assert!(d.has_channel(Channel::Logits));
    }

    #[test]
    fn malformed_inputs() {
        let cases = [
            "semicp,v1,K=2,features=0\nlabel,p_0,p_1\n",
            "#semicp,v2,K=2,features=0\nlabel,p_0,p_1\n",
            "#semicp,v1,K=2,features=0\nlabel,p_1,p_0\n",
            "#semicp,v1,K=2,features=1\nlabel,p_0,p_1\n",
            "#semicp,v1,K=2,features=0\nlabel,p_0,p_1\n0,0.5\n",
            "#semicp,v1,K=2,features=0\nlabel,p_0,p_1\n2,0.5,0.5\n",
            "#semicp,v1,K=2,features=0\nlabel,p_0,p_1\n-2,0.5,0.5\n",
            "#semicp,v1,K=2,features=0\nlabel,p_0,p_1\n0,NaN,0.5\n",
            "#semicp,v1,K=2,features=0\nlabel,p_0,p_1\n0,x,0.5\n",
        ];
        for case in cases {
            assert!(parse(case).is_err(), "accepted:\n{case}");
        }
    }

    fn record() -> ResultRecord {
        ResultRecord {
            method: "semicp/nnm".into(),
            score: "thr".into(),
            mode: "marginal".into(),
            n: 20,
            big_n: 4000,
            alpha: 0.1,
            trials: 3,
            cov_gap: 1.25,
            over_cov_gap: 0.5,
            under_cov_gap: 0.75,
            avg_size: 1.7,
            improvement: None,
            histogram: vec![0; HISTOGRAM_BINS],
            mean_coverage: 0.9,
            group_cov_gap: None,
            group_coverage: None,
            mean_epsilon: Some(-0.001),
            accuracy: Some(0.8),
        }
    }

    #[test]
    fn results_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = ResultsFile::new(vec![]);
        let p = dir.path().join("empty.json");
        write_results(&empty, &p, ResultsFormat::Json).unwrap();
        assert_eq!(read_results_json(&p).unwrap(), empty);
        let p = dir.path().join("empty.csv");
        write_results(&empty, &p, ResultsFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);

        let full = ResultsFile::new(vec![record()]);
        let p = dir.path().join("r.json");
        write_results(&full, &p, ResultsFormat::Json).unwrap();
        assert_eq!(read_results_json(&p).unwrap(), full);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"N\": 4000"));
        assert!(text.contains("\"improvement\": null"));

        let p = dir.path().join("r.csv");
        write_results(&full, &p, ResultsFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), results_csv_columns().join(","));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), results_csv_columns().len());
        assert_eq!(&row[..5], &["semicp/nnm", "thr", "marginal", "20", "4000"]);
        assert_eq!(row[11], "");
        assert_eq!(ResultsFormat::from_path(&p), ResultsFormat::Csv);
    }
}
