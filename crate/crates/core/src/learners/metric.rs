use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::diffcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Fraction of rows whose argmax matches the target argmax.
    Accuracy,
    /// Mean squared error over all elements.
    Mse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
        }
    }
}

pub fn episode_metric(predictions: &Tensor, targets: &Tensor, kind: MetricKind) -> Result<f64, LearnError> {
    if predictions.shape().len() != 2 || predictions.shape() != targets.shape() {
        return Err(LearnError::Episode {
            what: "episode_metric",
            message: format!(
                "prediction shape {:?} does not match target shape {:?}",
                predictions.shape(),
                targets.shape()
            ),
        });
    }
    let rows = predictions.rows();
    if rows == 0 {
        return Err(LearnError::EmptyQuery);
    }
    Ok(match kind {
        MetricKind::Accuracy => {
            let hits = predictions
                .argmax_rows()
                .iter()
                .zip(targets.argmax_rows())
                .filter(|(p, t)| **p == *t)
                .count();
            hits as f64 / rows as f64
        }
        MetricKind::Mse => {
            let sq: f64 = predictions
                .data()
                .iter()
                .zip(targets.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            sq / predictions.len() as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_matches() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let t = Tensor::one_hot(&labels, 2).unwrap();
        assert_eq!(episode_metric(&t, &t, MetricKind::Accuracy).unwrap(), 1.0);
        let mut wrong = labels.clone();
        for w in wrong.iter_mut().skip(3) {
            *w = 1 - *w;
        }
        let p = Tensor::one_hot(&wrong, 2).unwrap();
        assert_eq!(episode_metric(&p, &t, MetricKind::Accuracy).unwrap(), 0.3);
    }

    #[test]
    fn mse_zero_on_exact_and_empty_rejected() {
        let t = Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        assert_eq!(episode_metric(&t, &t, MetricKind::Mse).unwrap(), 0.0);
        let e = Tensor::zeros(&[0, 1]);
        assert_eq!(
            episode_metric(&e, &e, MetricKind::Mse),
            Err(LearnError::EmptyQuery)
        );
    }
}
