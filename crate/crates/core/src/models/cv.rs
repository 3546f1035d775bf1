//! Deterministic stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::models::metrics::{auprc, auroc};
use crate::models::Classifier;
use crate::scalar::Scalar;

/// Test metrics of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics<S: Scalar> {
    pub fold: usize,
    pub auroc: S,
    pub auprc: S,
    pub n_test: usize,
}

/// Cross-validated evaluation: per-fold metrics with their mean and
/// population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<S: Scalar> {
    pub auroc_mean: S,
    pub auroc_std: S,
    pub auprc_mean: S,
    pub auprc_std: S,
    pub per_fold: Vec<FoldMetrics<S>>,
}

fn mean_std<S: Scalar>(values: &[S]) -> (S, S) {
    let n = S::from_count(values.len());
    let mean = values.iter().copied().sum::<S>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, var.sqrt())
}

/// Stratified fold assignment: positives and negatives are shuffled
/// separately with a seeded generator and dealt round-robin, so per-fold
/// class counts differ from proportionality by at most one sample.
/// Returns the test-row indices of each fold, each sorted ascending.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("k", "need at least 2 folds"));
    }
    if labels.len() < k {
        return Err(Error::invalid("k", "more folds than samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut folds = vec![Vec::new(); k];
    for (i, idx) in pos.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for (i, idx) in neg.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Trains on the complement of each fold and scores on the fold itself.
/// `trainer` must be a pure function of the training cohort.
pub fn kfold_cv<S, M, F>(cohort: &Cohort<S>, k: usize, trainer: F, seed: u64) -> Result<EvalReport<S>>
where
    S: Scalar,
    M: Classifier<S>,
    F: Fn(&Cohort<S>) -> Result<M> + Sync,
{
    let folds = stratified_folds(&cohort.labels, k, seed)?;
    kfold_cv_with_folds(cohort, &folds, trainer)
}

/// [`kfold_cv`] against a caller-supplied fold partition, so repeated
/// studies can reuse identical folds.
pub fn kfold_cv_with_folds<S, M, F>(
    cohort: &Cohort<S>,
    folds: &[Vec<usize>],
    trainer: F,
) -> Result<EvalReport<S>>
where
    S: Scalar,
    M: Classifier<S>,
    F: Fn(&Cohort<S>) -> Result<M> + Sync,
{
    let n = cohort.n_samples();
    let mut per_fold = Vec::with_capacity(folds.len());
    for (fold_idx, test) in folds.iter().enumerate() {
        let in_test: Vec<bool> = {
            let mut mask = vec![false; n];
            for &i in test {
                mask[i] = true;
            }
            mask
        };
        let train_rows: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
        let train = cohort.select_rows(&train_rows);
        let classes = train.labels.iter().filter(|&&y| y == 1).count();
        if classes == 0 || classes == train.labels.len() {
            return Err(Error::DegenerateFold { fold: fold_idx });
        }
        let model = trainer(&train)?;

        let mut scores = Vec::with_capacity(test.len());
        let mut labels = Vec::with_capacity(test.len());
        for &i in test {
            let row = cohort.features.row(i);
            scores.push(model.predict_proba(row.as_slice().expect("contiguous row"))?);
            labels.push(cohort.labels[i]);
        }
        let fold_auroc = auroc(&scores, &labels)
            .map_err(|e| if matches!(e, Error::SingleClass) { Error::DegenerateFold { fold: fold_idx } } else { e })?;
        let fold_auprc = auprc(&scores, &labels)
            .map_err(|e| if matches!(e, Error::SingleClass) { Error::DegenerateFold { fold: fold_idx } } else { e })?;
        per_fold.push(FoldMetrics {
            fold: fold_idx,
            auroc: fold_auroc,
            auprc: fold_auprc,
            n_test: test.len(),
        });
    }

    let (auroc_mean, auroc_std) = mean_std(&per_fold.iter().map(|f| f.auroc).collect::<Vec<_>>());
    let (auprc_mean, auprc_std) = mean_std(&per_fold.iter().map(|f| f.auprc).collect::<Vec<_>>());
    Ok(EvalReport {
        auroc_mean,
        auroc_std,
        auprc_mean,
        auprc_std,
        per_fold,
    })
}
