//! Logistic-regression baseline trained by full-batch gradient descent on
//! L2-regularized log loss, with internal feature standardization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel<S: Scalar> {
    pub weights: Vec<S>,
    pub bias: S,
    /// Per-feature (mean, std) applied at predict time; std 0 is stored as 1.
    pub standardization: Vec<(S, S)>,
    pub feature_names: Vec<String>,
}

impl<S: Scalar> LinearModel<S> {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_proba(&self, x: &[S]) -> Result<S> {
        if x.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                context: "feature vector vs model".into(),
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        let mut z = self.bias;
        for (i, &v) in x.iter().enumerate() {
            let (mean, std) = self.standardization[i];
            z = z + self.weights[i] * ((v - mean) / std);
        }
        Ok(sigmoid(z))
    }

    pub fn predict_proba_matrix(&self, features: &Array2<S>) -> Result<Vec<S>> {
        features
            .rows()
            .into_iter()
            .map(|row| self.predict_proba(row.as_slice().expect("contiguous row")))
            .collect()
    }
}

impl<S: Scalar> Classifier<S> for LinearModel<S> {
    fn predict_proba(&self, x: &[S]) -> Result<S> {
        LinearModel::predict_proba(self, x)
    }

    fn n_features(&self) -> usize {
        LinearModel::n_features(self)
    }
}

/// Gradient descent on the regularized mean log loss. Weights and bias
/// start at zero, so `epochs = 0` yields the constant 0.5 predictor.
pub fn train_logreg<S: Scalar>(
    cohort: &Cohort<S>,
    epochs: usize,
    step: f64,
    l2: f64,
) -> Result<LinearModel<S>> {
    cohort.validate()?;
    cohort.ensure_finite().map_err(|_| Error::NonFinite {
        context: "logistic regression requires a fully observed (imputed) matrix".into(),
    })?;
    let n = cohort.n_samples();
    let p = cohort.n_features();
    let n_pos = cohort.labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass);
    }

    let n_s = S::from_count(n);
    let standardization: Vec<(S, S)> = (0..p)
        .map(|c| {
            let col = cohort.features.column(c);
            let mean = col.iter().copied().sum::<S>() / n_s;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n_s;
            let std = var.sqrt();
            (mean, if std > S::zero() { std } else { S::one() })
        })
        .collect();

    let mut z = Array2::<S>::zeros((n, p));
    for r in 0..n {
        for c in 0..p {
            let (mean, std) = standardization[c];
            z[[r, c]] = (cohort.features[[r, c]] - mean) / std;
        }
    }

    let step = S::cast(step);
    let l2 = S::cast(l2);
    let mut weights = vec![S::zero(); p];
    let mut bias = S::zero();
    for _ in 0..epochs {
        let mut grad_w = vec![S::zero(); p];
        let mut grad_b = S::zero();
        for r in 0..n {
            let mut m = bias;
            for c in 0..p {
                m = m + weights[c] * z[[r, c]];
            }
            let residual = sigmoid(m) - S::from_count(cohort.labels[r] as usize);
            grad_b = grad_b + residual;
            for c in 0..p {
                grad_w[c] = grad_w[c] + residual * z[[r, c]];
            }
        }
        for c in 0..p {
            weights[c] = weights[c] - step * (grad_w[c] / n_s + l2 * weights[c]);
        }
        bias = bias - step * grad_b / n_s;
    }
    if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
        return Err(Error::NonFinite {
            context: "logistic regression diverged; lower the step size".into(),
        });
    }

    Ok(LinearModel {
        weights,
        bias,
        standardization,
        feature_names: cohort.feature_names.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn cohort_2d(rows: &[(f64, f64, u8)]) -> Cohort<f64> {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for &(a, b, y) in rows {
            values.push(a);
            values.push(b);
            labels.push(y);
        }
        Cohort {
            features: Array2::from_shape_vec((rows.len(), 2), values).unwrap(),
            labels,
            phenotype: None,
            feature_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn separable_2d_reaches_perfect_accuracy() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 3.0;
            rows.push((t + 1.0, t, 1u8));
            rows.push((-t - 1.0, -t, 0u8));
        }
        let cohort = cohort_2d(&rows);
        let model = train_logreg(&cohort, 500, 0.5, 1e-4).unwrap();
        for (i, row) in cohort.features.rows().into_iter().enumerate() {
            let p = model.predict_proba(row.as_slice().unwrap()).unwrap();
            assert_eq!(u8::from(p > 0.5), cohort.labels[i]);
        }
    }

    #[test]
    fn zero_epochs_predicts_half_everywhere() {
        let cohort = cohort_2d(&[(1.0, 2.0, 1), (3.0, 4.0, 0)]);
        let model = train_logreg(&cohort, 0, 0.5, 0.0).unwrap();
        assert!(model.weights.iter().all(|&w| w == 0.0));
        assert_eq!(model.predict_proba(&[10.0, -10.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_errors() {
        let cohort = cohort_2d(&[(1.0, 2.0, 1), (3.0, 4.0, 1)]);
        assert!(matches!(
            train_logreg(&cohort, 10, 0.1, 0.0),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn nan_features_are_rejected() {
        let cohort = cohort_2d(&[(f64::NAN, 2.0, 1), (3.0, 4.0, 0)]);
        assert!(matches!(
            train_logreg(&cohort, 10, 0.1, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }
}
