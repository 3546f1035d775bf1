//! Binary risk classifiers and their evaluation: gradient boosting over
//! logistic loss, a logistic-regression baseline, ranking metrics, and
//! stratified cross-validation.

pub mod cv;
pub mod gbm;
pub mod linear;
pub mod metrics;

pub use cv::{kfold_cv, kfold_cv_with_folds, stratified_folds, EvalReport, FoldMetrics};
pub use gbm::{train_gbm, GbmModel, RegressionTree, TrainConfig, TreeNode};
pub use linear::{train_logreg, LinearModel};
pub use metrics::{auprc, auroc};

use crate::error::Result;
use crate::scalar::Scalar;

/// Anything that maps a feature vector to a probability in (0, 1).
pub trait Classifier<S: Scalar>: Send + Sync {
    fn predict_proba(&self, x: &[S]) -> Result<S>;
    fn n_features(&self) -> usize;
}
