//! Confusion matrices and the metrics derived from them: accuracy,
//! one-vs-rest precision, recall and F1, macro averages, and side-by-side
//! comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{truth} true labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("class names differ: {0:?} vs {1:?}")]
    ClassMismatch(Vec<String>, Vec<String>),
    #[error("no reports to compare")]
    NoReports,
    #[error("malformed report: {0}")]
    Parse(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// `K × K` counts; entry `(i, j)` is the number of samples of true class
/// `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Self {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let k = classes.len();
        Self { classes, counts: vec![0; k * k] }
    }

    /// Builds a matrix from a `K × K` row-major count table.
    pub fn from_counts<S: Into<String>>(classes: impl IntoIterator<Item = S>, counts: Vec<u64>) -> Result<Self> {
        let cm = Self::new(classes);
        if counts.len() != cm.counts.len() {
            return Err(MetricsError::LengthMismatch { truth: cm.counts.len(), predicted: counts.len() });
        }
        Ok(Self { counts, ..cm })
    }

    pub fn from_labels<S: Into<String>>(classes: impl IntoIterator<Item = S>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let mut cm = Self::new(classes);
        if truth.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.num_classes();
        for label in [truth, predicted] {
            if label >= k {
                return Err(MetricsError::LabelOutOfRange { label, classes: k });
            }
        }
        self.counts[truth * k + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(MetricsError::ClassMismatch(self.classes.clone(), other.classes.clone()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes() + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }

    /// Support of class `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.num_classes()).map(|j| self.get(i, j)).sum()
    }

    /// Number of predictions of class `j`.
    pub fn column_sum(&self, j: usize) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, j)).sum()
    }

    /// Multiclass accuracy, `trace / total`.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(MetricsError::Empty),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    /// One-vs-rest counts and rates for `class`.
    pub fn class_metrics(&self, class: usize) -> ClassMetrics {
        let tp = self.get(class, class);
        let fn_ = self.row_sum(class) - tp;
        let fp = self.column_sum(class) - tp;
        let tn = self.total() - tp - fn_ - fp;
        ClassMetrics::from_counts(self.classes[class].clone(), tp, fp, fn_, tn)
    }

    /// The same matrix with class `i` moved to position `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let k = self.num_classes();
        let mut out = Self::new(vec![String::new(); k]);
        for i in 0..k {
            out.classes[order[i]] = self.classes[i].clone();
            for j in 0..k {
                out.counts[order[i] * k + order[j]] = self.get(i, j);
            }
        }
        out
    }
}

/// `numerator / denominator`, or 0 with `undefined` set when the
/// denominator is zero.
fn ratio(numerator: u64, denominator: u64) -> (f64, bool) {
    if denominator == 0 {
        (0.0, true)
    } else {
        (numerator as f64 / denominator as f64, false)
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// One-vs-rest confusion counts for a single class and the rates derived
/// from them. A rate whose denominator is zero is reported as 0 and
/// flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl ClassMetrics {
    pub fn from_counts(class: String, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        Self {
            class,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1: f1_score(precision, recall),
            precision_undefined,
            recall_undefined,
        }
    }

    /// Binary accuracy of the one-vs-rest split, `(TP + TN) / total`.
    pub fn binary_accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_).0
    }
}

/// Accuracy, per-class metrics and unweighted class means for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub total: u64,
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl Report {
    pub fn new(cm: &ConfusionMatrix, model: impl Into<String>) -> Result<Self> {
        let accuracy = cm.accuracy()?;
        let classes: Vec<ClassMetrics> = (0..cm.num_classes()).map(|k| cm.class_metrics(k)).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / classes.len() as f64;
        Ok(Self {
            model: model.into(),
            total: cm.total(),
            accuracy,
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            classes,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class.clone()).collect()
    }

    /// Classes with an undefined precision or recall.
    pub fn degenerate_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|c| c.precision_undefined || c.recall_undefined)
            .map(|c| c.class.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))
    }

    /// Human-readable summary: per-class table, macro averages, accuracy,
    /// and any zero-denominator flags.
    pub fn render(&self) -> String {
        let width = self.classes.iter().map(|c| c.class.len()).max().unwrap_or(5).max(5);
        let mut out = format!("model: {}\nsamples: {}\n\n", self.model, self.total);
        let _ = writeln!(out, "{:<width$}  precision  recall     f1  support", "class");
        for c in &self.classes {
            let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>6.4}  {:>5.4}  {:>7}", c.class, c.precision, c.recall, c.f1, c.tp + c.fn_);
        }
        let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>6.4}  {:>5.4}", "macro", self.macro_precision, self.macro_recall, self.macro_f1);
        let _ = writeln!(out, "\naccuracy: {:.4}", self.accuracy);
        let degenerate = self.degenerate_classes();
        if !degenerate.is_empty() {
            let _ = writeln!(out, "undefined precision or recall (reported as 0): {}", degenerate.join(", "));
        }
        out
    }
}

/// Metrics of several models side by side, grouped by metric then class.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    /// `(metric, class, one value per model)`; accuracy rows have class `all`.
    pub rows: Vec<(String, String, Vec<f64>)>,
}

pub fn compare(reports: &[Report]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    let names = first.class_names();
    for r in &reports[1..] {
        if r.class_names() != names {
            return Err(MetricsError::ClassMismatch(names, r.class_names()));
        }
    }
    let mut rows = Vec::new();
    let metrics: [(&str, fn(&ClassMetrics) -> f64); 3] = [("Precision", |c| c.precision), ("Recall", |c| c.recall), ("F1 score", |c| c.f1)];
    for (label, get) in metrics {
        for (k, class) in names.iter().enumerate() {
            rows.push((label.to_string(), class.clone(), reports.iter().map(|r| get(&r.classes[k])).collect()));
        }
    }
    rows.push(("Accuracy".into(), "all".into(), reports.iter().map(|r| r.accuracy).collect()));
    Ok(ComparisonTable { models: reports.iter().map(|r| r.model.clone()).collect(), rows })
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let cw = self.rows.iter().map(|r| r.1.len()).max().unwrap_or(5).max(5);
        let mw: Vec<usize> = self.models.iter().map(|m| m.len().max(6)).collect();
        let mut out = format!("{:<10}  {:<cw$}", "Parameters", "Class");
        for (m, w) in self.models.iter().zip(&mw) {
            let _ = write!(out, "  {m:>w$}");
        }
        out.push('\n');
        let mut last = "";
        for (metric, class, values) in &self.rows {
            let shown = if metric == last { "" } else { metric.as_str() };
            last = metric;
            let _ = write!(out, "{shown:<10}  {class:<cw$}");
            for (v, w) in values.iter().zip(&mw) {
                let _ = write!(out, "  {v:>w$.4}");
            }
            out.push('\n');
        }
        out
    }
}
