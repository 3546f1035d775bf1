//! Ranking metrics: AUROC by rank statistics and AUPRC in the
//! average-precision form.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_inputs<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            context: "scores vs labels".into(),
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "scores".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid("labels", format!("label {bad} is not 0/1")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a positive outranks a negative, counting ties as 1/2;
/// computed from average ranks (Mann-Whitney U), O(n log n).
pub fn auroc<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<S> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    let mut rank_sum_pos = S::zero();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied scores share the average rank
        let avg_rank = S::cast((i + j + 1) as f64 / 2.0);
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos = rank_sum_pos + avg_rank;
            }
        }
        i = j;
    }
    let np = S::from_count(n_pos);
    let u = rank_sum_pos - np * (np + S::one()) / S::two();
    Ok(u / (np * S::from_count(n_neg)))
}

/// Area under the precision-recall curve as average precision:
/// sum of (R_k - R_{k-1}) * P_k over descending distinct score thresholds.
pub fn auprc<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<S> {
    let (n_pos, _) = check_inputs(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let total_pos = S::from_count(n_pos);
    let mut tp = S::zero();
    let mut fp = S::zero();
    let mut prev_recall = S::zero();
    let mut ap = S::zero();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                tp = tp + S::one();
            } else {
                fp = fp + S::one();
            }
        }
        let recall = tp / total_pos;
        let precision = tp / (tp + fp);
        ap = ap + (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}
