//! Accuracy, per-class precision/recall/F1, macro-F1 and the confusion matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::models::Model;

/// Number of worker threads used by [`evaluate`]. Fixed so that results do
/// not depend on the host.
pub const EVAL_SHARDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Samples whose true class is this one.
    pub support: usize,
    /// Samples predicted as this class.
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub num_classes: usize,
    pub accuracy: f64,
    /// Unweighted mean of the per-class F1 scores, over all classes.
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

impl EvalReport {
    /// Metrics from paired true and predicted labels.
    ///
    /// A class with no true and no predicted samples has precision, recall
    /// and F1 of 0 and still counts toward the macro average.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Index {
                    table: "classes".into(),
                    index: t.max(p),
                    size: k,
                });
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion, class_names))
    }

    fn from_confusion(confusion: Vec<Vec<usize>>, class_names: &[String]) -> Self {
        let k = class_names.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
                ClassMetrics {
                    name: class_names[c].clone(),
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, support),
                    f1: ratio(2 * tp, support + predicted),
                    support,
                    predicted,
                }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64;
        Self {
            n_samples: n,
            num_classes: k,
            accuracy: correct as f64 / n as f64,
            macro_f1,
            per_class,
            confusion_matrix: confusion,
            loss: None,
        }
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.per_class.iter().map(|m| m.name.as_str()).collect()
    }
}

/// Predictions for `samples` in input order, computed on a fixed number of
/// threads.
pub fn predict_all(model: &Model, samples: &[&MultimodalSample]) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = samples.len().div_ceil(EVAL_SHARDS);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| Error::Invariant("evaluation worker panicked".into()))??,
            );
        }
        Ok(out)
    })
}

pub fn evaluate(model: &Model, samples: &[&MultimodalSample], class_names: &[String]) -> Result<EvalReport> {
    if class_names.len() != model.config().num_classes {
        return Err(Error::invalid(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.config().num_classes
        )));
    }
    let predicted = predict_all(model, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    EvalReport::from_predictions(&truth, &predicted, class_names)
}

/// Writes the confusion matrix as CSV: a header row of predicted class
/// names, then one row per true class.
pub fn export_confusion_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let names = report.class_names();
    let mut header = vec!["true\\pred"];
    header.extend(&names);
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(&report.confusion_matrix) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
