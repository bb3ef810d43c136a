//! Probability datasets and validated probability rows.

use std::fmt;

use crate::error::{Error, Result};

/// Absolute tolerance on the row sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// A softmax output row: `K >= 2` nonnegative entries summing to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbVector<'a>(&'a [f64]);

impl<'a> ProbVector<'a> {
    pub fn new(values: &'a [f64]) -> Result<Self> {
        validate_row(values).map_err(Error::Input)?;
        Ok(ProbVector(values))
    }

    /// Wrap a row that has already been validated (e.g. on ingestion).
    pub fn trusted(values: &'a [f64]) -> Self {
        debug_assert!(validate_row(values).is_ok());
        ProbVector(values)
    }

    pub fn values(&self) -> &'a [f64] {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Largest probability and its class, ties resolved to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.0[0]);
        for (j, &p) in self.0.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (j, p);
            }
        }
        best
    }
}

pub(crate) fn validate_row(values: &[f64]) -> std::result::Result<(), String> {
    if values.len() < 2 {
        return Err(format!("need at least 2 classes, got {}", values.len()));
    }
    let mut sum = 0.0;
    for (j, &p) in values.iter().enumerate() {
        if !p.is_finite() {
            return Err(format!("probability {j} is not finite"));
        }
        if p < 0.0 {
            return Err(format!("probability {j} is negative ({p})"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(format!("probabilities sum to {sum}, expected 1"));
    }
    Ok(())
}

/// Numerically stable softmax of `logits / temperature` into `out`.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Optional per-sample data channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Labels,
    Logits,
    Features,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Labels => "labels",
            Channel::Logits => "logits",
            Channel::Features => "features",
        })
    }
}

/// Per-sample model outputs with optional labels, logits and features.
///
/// Rows are validated once on construction and trusted afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityDataset {
    num_classes: usize,
    probs: Vec<f64>,
    labels: Vec<Option<usize>>,
    logits: Option<Vec<f64>>,
    features: Option<Vec<f64>>,
    feature_dim: usize,
}

impl ProbabilityDataset {
    /// Build from row-major probabilities. `labels` has one entry per row;
    /// `None` marks an unlabeled sample.
    pub fn new(num_classes: usize, probs: Vec<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::input(format!("need at least 2 classes, got {num_classes}")));
        }
        if probs.len() != labels.len() * num_classes {
            return Err(Error::input(format!(
                "{} probabilities do not form {} rows of {num_classes}",
                probs.len(),
                labels.len()
            )));
        }
        for (i, row) in probs.chunks_exact(num_classes).enumerate() {
            validate_row(row).map_err(|e| Error::input(format!("row {i}: {e}")))?;
        }
        for (i, label) in labels.iter().enumerate() {
            if let Some(y) = *label {
                if y >= num_classes {
                    return Err(Error::input(format!("row {i}: label {y} outside 0..{num_classes}")));
                }
            }
        }
        Ok(Self {
            num_classes,
            probs,
            labels,
            logits: None,
            features: None,
            feature_dim: 0,
        })
    }

    /// Build from row-major logits; probabilities are their softmax at
    /// temperature 1. The logits are kept as a channel.
    pub fn from_logits(num_classes: usize, logits: Vec<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        if num_classes < 2 || logits.len() != labels.len() * num_classes {
            return Err(Error::input("logits do not match label count and class count"));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::input("non-finite logit"));
        }
        let mut probs = vec![0.0; logits.len()];
        for (z, p) in logits
            .chunks_exact(num_classes)
            .zip(probs.chunks_exact_mut(num_classes))
        {
            softmax_into(z, 1.0, p);
        }
        Self::new(num_classes, probs, labels)?.with_logits(logits)
    }

    pub fn with_logits(mut self, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != self.probs.len() {
            return Err(Error::input("logit channel size does not match probabilities"));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::input("non-finite logit"));
        }
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn with_features(mut self, dim: usize, features: Vec<f64>) -> Result<Self> {
        if dim == 0 || features.len() != dim * self.len() {
            return Err(Error::input(format!(
                "{} feature values do not form {} rows of {dim}",
                features.len(),
                self.len()
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::input("non-finite feature"));
        }
        self.features = Some(features);
        self.feature_dim = dim;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn probs(&self, row: usize) -> ProbVector<'_> {
        let k = self.num_classes;
        ProbVector::trusted(&self.probs[row * k..(row + 1) * k])
    }

    pub fn label(&self, row: usize) -> Option<usize> {
        self.labels[row]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn logits(&self, row: usize) -> Option<&[f64]> {
        let k = self.num_classes;
        self.logits.as_ref().map(|z| &z[row * k..(row + 1) * k])
    }

    pub fn features(&self, row: usize) -> Option<&[f64]> {
        let d = self.feature_dim;
        self.features.as_ref().map(|f| &f[row * d..(row + 1) * d])
    }

    pub fn has_channel(&self, channel: Channel) -> bool {
        match channel {
            Channel::Labels => self.labels.iter().all(Option::is_some),
            Channel::Logits => self.logits.is_some(),
            Channel::Features => self.features.is_some(),
        }
    }

    /// A copy with every label removed, as seen by an unlabeled pool.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: vec![None; self.len()],
            ..self.clone()
        }
    }

    pub fn view(&self) -> Subset<'_> {
        Subset { data: self, rows: None }
    }

    pub fn subset<'a>(&'a self, rows: &'a [usize]) -> Subset<'a> {
        Subset { data: self, rows: Some(rows) }
    }
}

/// A borrowed selection of dataset rows, in selection order.
#[derive(Clone, Copy, Debug)]
pub struct Subset<'a> {
    data: &'a ProbabilityDataset,
    rows: Option<&'a [usize]>,
}

impl<'a> Subset<'a> {
    pub fn dataset(&self) -> &'a ProbabilityDataset {
        self.data
    }

    pub fn len(&self) -> usize {
        self.rows.map_or(self.data.len(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    /// Dataset row of the `i`-th selected sample.
    #[inline]
    pub fn row(&self, i: usize) -> usize {
        self.rows.map_or(i, |r| r[i])
    }

    #[inline]
    pub fn probs(&self, i: usize) -> ProbVector<'a> {
        self.data.probs(self.row(i))
    }

    #[inline]
    pub fn label(&self, i: usize) -> Option<usize> {
        self.data.label(self.row(i))
    }

    pub fn logits(&self, i: usize) -> Option<&'a [f64]> {
        self.data.logits(self.row(i))
    }

    pub fn features(&self, i: usize) -> Option<&'a [f64]> {
        self.data.features(self.row(i))
    }

    /// All labels, or an input error if any sample is unlabeled.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        (0..self.len())
            .map(|i| {
                self.label(i)
                    .ok_or_else(|| Error::input(format!("sample {i} has no label")))
            })
            .collect()
    }
}
