use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::dataio::{EpochSet, N_STAGES};
use crate::error::{Result, SslError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub accuracy: f64,
    /// Mean F1 over classes present in the evaluation labels.
    pub macro_f1: f64,
    /// 0 for classes without support.
    pub per_class_f1: [f64; N_STAGES],
    pub support: [usize; N_STAGES],
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; N_STAGES]; N_STAGES],
    pub n_eval: usize,
}

impl MetricsBundle {
    pub fn from_confusion(confusion: [[usize; N_STAGES]; N_STAGES]) -> Result<Self> {
        let n_eval: usize = confusion.iter().flatten().sum();
        if n_eval == 0 {
            return Err(SslError::InvalidArgument("no epochs to evaluate".into()));
        }
        let correct: usize = (0..N_STAGES).map(|c| confusion[c][c]).sum();
        let mut per_class_f1 = [0.0; N_STAGES];
        let mut support = [0; N_STAGES];
        for c in 0..N_STAGES {
            support[c] = confusion[c].iter().sum();
            let predicted: usize = (0..N_STAGES).map(|t| confusion[t][c]).sum();
            let tp = confusion[c][c] as f64;
            // F1 = 2TP / (2TP + FP + FN), which is 0 whenever P + R = 0
            let denom = (support[c] + predicted) as f64;
            per_class_f1[c] = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        }
        let present: Vec<f64> = (0..N_STAGES).filter(|&c| support[c] > 0).map(|c| per_class_f1[c]).collect();
        Ok(Self {
            accuracy: correct as f64 / n_eval as f64,
            macro_f1: present.iter().sum::<f64>() / present.len() as f64,
            per_class_f1,
            support,
            confusion,
            n_eval,
        })
    }

    /// Scores predicted against true class indices.
    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(SslError::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
        }
        let mut confusion = [[0; N_STAGES]; N_STAGES];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= N_STAGES || t >= N_STAGES {
                return Err(SslError::InvalidArgument(format!("class index out of range: {t} -> {p}")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Argmax predictions of `model` on every epoch of `set`.
pub fn predict(model: &Model, set: &EpochSet, batch: usize) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(SslError::InvalidArgument("empty evaluation set".into()));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    Ok(model.predict_logits(&set.batch(&all), batch)?.argmax_rows())
}

pub fn evaluate(model: &Model, test: &EpochSet) -> Result<MetricsBundle> {
    let pred = predict(model, test, 256)?;
    MetricsBundle::from_predictions(&pred, &test.batch_labels(&(0..test.len()).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 4, 2];
        let m = MetricsBundle::from_predictions(&y, &y).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_labels() {
        let truth: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let m = MetricsBundle::from_predictions(&[0; 50], &truth).unwrap();
        assert_eq!(m.accuracy, 0.2);
        assert!((m.macro_f1 - 0.2 * (2.0 * 0.2 / 1.2)).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_leave_the_macro_mean() {
        let m = MetricsBundle::from_predictions(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.support, [1, 2, 0, 0, 0]);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(MetricsBundle::from_predictions(&[], &[]).is_err());
    }
}
