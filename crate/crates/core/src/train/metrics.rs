use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification scores built from a confusion matrix whose rows are true
/// classes and columns predicted classes. Classes with no support score an
/// F1 of 0 and still count toward the macro mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= n_classes || p >= n_classes {
                return Err(Error::Contract(format!("class index out of range 0..{n_classes}")));
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Input("no predictions to score".into()));
        }
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_f1: Vec<f64> = (0..k)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let support: u64 = confusion[c].iter().sum();
                let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
                if support == 0 || tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (support + predicted) as f64
                }
            })
            .collect();
        Ok(Metrics {
            accuracy: trace as f64 / total as f64,
            macro_f1: per_class_f1.iter().sum::<f64>() / k as f64,
            per_class_f1,
            confusion,
        })
    }

    /// Sums the confusion matrices of disjoint shards and rescores.
    pub fn merge(parts: &[Metrics]) -> Result<Self> {
        let k = parts.first().map_or(0, |m| m.confusion.len());
        let mut confusion = vec![vec![0; k]; k];
        for m in parts {
            if m.confusion.len() != k {
                return Err(Error::Contract("cannot merge metrics over different class counts".into()));
            }
            for (acc, row) in confusion.iter_mut().zip(&m.confusion) {
                acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        Self::from_confusion(confusion)
    }

    pub fn support(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}
