//! Personalized explanations for the boosted ensemble: per-tree
//! path-dependent SHAP in margin (log-odds) space, subset-enumeration
//! oracles for validation, and the cohort explanation matrix.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::models::gbm::{GbmModel, RegressionTree};
use crate::scalar::Scalar;

/// Per-feature attributions for one input, in margin units.
/// `base_value + sum(values)` equals the model margin at the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapVector<S: Scalar> {
    pub values: Vec<S>,
    /// Expected margin over the explanation background.
    pub base_value: S,
}

/// Row-aligned attributions for a whole cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapMatrix<S: Scalar> {
    /// N x P attribution values, rows aligned with the cohort.
    pub values: Array2<S>,
    pub base_values: Vec<S>,
    pub feature_names: Vec<String>,
}

impl<S: Scalar> ShapMatrix<S> {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ShapVector<S> {
        ShapVector {
            values: self.values.row(i).to_vec(),
            base_value: self.base_values[i],
        }
    }
}

fn check_covers<S: Scalar>(model: &GbmModel<S>) -> Result<()> {
    for tree in &model.trees {
        for (idx, node) in tree.nodes.iter().enumerate() {
            if !(node.cover > S::zero()) {
                return Err(Error::ZeroCover { node: idx });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct PathElement<S> {
    feature: usize,
    zero_fraction: S,
    one_fraction: S,
    pweight: S,
}

fn extend_path<S: Scalar>(
    path: &mut Vec<PathElement<S>>,
    unique_depth: usize,
    zero_fraction: S,
    one_fraction: S,
    feature: usize,
) {
    let element = PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if unique_depth == 0 { S::one() } else { S::zero() },
    };
    if unique_depth == path.len() {
        path.push(element);
    } else {
        path[unique_depth] = element;
    }
    let d1 = S::from_count(unique_depth + 1);
    for i in (0..unique_depth).rev() {
        path[i + 1].pweight = path[i + 1].pweight
            + one_fraction * path[i].pweight * S::from_count(i + 1) / d1;
        path[i].pweight = zero_fraction * path[i].pweight * S::from_count(unique_depth - i) / d1;
    }
}

fn unwind_path<S: Scalar>(path: &mut [PathElement<S>], unique_depth: usize, path_index: usize) {
    let one_fraction = path[path_index].one_fraction;
    let zero_fraction = path[path_index].zero_fraction;
    let d1 = S::from_count(unique_depth + 1);
    let mut next_one = path[unique_depth].pweight;
    for i in (0..unique_depth).rev() {
        if one_fraction != S::zero() {
            let tmp = path[i].pweight;
            path[i].pweight = next_one * d1 / (S::from_count(i + 1) * one_fraction);
            next_one =
                tmp - path[i].pweight * zero_fraction * S::from_count(unique_depth - i) / d1;
        } else {
            path[i].pweight =
                path[i].pweight * d1 / (zero_fraction * S::from_count(unique_depth - i));
        }
    }
    for i in path_index..unique_depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_sum<S: Scalar>(path: &[PathElement<S>], unique_depth: usize, path_index: usize) -> S {
    let one_fraction = path[path_index].one_fraction;
    let zero_fraction = path[path_index].zero_fraction;
    let d1 = S::from_count(unique_depth + 1);
    let mut next_one = path[unique_depth].pweight;
    let mut total = S::zero();
    for i in (0..unique_depth).rev() {
        if one_fraction != S::zero() {
            let tmp = next_one * d1 / (S::from_count(i + 1) * one_fraction);
            total = total + tmp;
            next_one = path[i].pweight - tmp * zero_fraction * S::from_count(unique_depth - i) / d1;
        } else if zero_fraction != S::zero() {
            total = total
                + path[i].pweight / zero_fraction * d1 / S::from_count(unique_depth - i);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn tree_recurse<S: Scalar>(
    tree: &RegressionTree<S>,
    x: &[S],
    phi: &mut [S],
    node_idx: usize,
    mut unique_depth: usize,
    mut path: Vec<PathElement<S>>,
    parent_zero: S,
    parent_one: S,
    parent_feature: usize,
) {
    extend_path(&mut path, unique_depth, parent_zero, parent_one, parent_feature);
    let node = &tree.nodes[node_idx];

    if node.is_leaf {
        for i in 1..=unique_depth {
            let w = unwound_sum(&path, unique_depth, i);
            let el = &path[i];
            phi[el.feature] =
                phi[el.feature] + w * (el.one_fraction - el.zero_fraction) * node.leaf_value;
        }
        return;
    }

    let v = x[node.feature];
    let go_left = if v.is_nan() { node.default_left } else { v < node.threshold };
    let (hot, cold) = if go_left {
        (node.left, node.right)
    } else {
        (node.right, node.left)
    };

    // A feature already on the path is unwound first; its fractions
    // compound into the child calls.
    let mut incoming_zero = S::one();
    let mut incoming_one = S::one();
    let mut found = None;
    for i in 1..=unique_depth {
        if path[i].feature == node.feature {
            found = Some(i);
            break;
        }
    }
    if let Some(i) = found {
        incoming_zero = path[i].zero_fraction;
        incoming_one = path[i].one_fraction;
        unwind_path(&mut path, unique_depth, i);
        unique_depth -= 1;
    }

    let cover = node.cover;
    let hot_zero = tree.nodes[hot].cover / cover * incoming_zero;
    let cold_zero = tree.nodes[cold].cover / cover * incoming_zero;
    tree_recurse(
        tree,
        x,
        phi,
        hot,
        unique_depth + 1,
        path.clone(),
        hot_zero,
        incoming_one,
        node.feature,
    );
    tree_recurse(
        tree,
        x,
        phi,
        cold,
        unique_depth + 1,
        path,
        cold_zero,
        S::zero(),
        node.feature,
    );
}

/// Expected margin of the model over its training distribution, read off
/// the stored cover-weighted node values.
pub fn expected_margin<S: Scalar>(model: &GbmModel<S>) -> S {
    let tree_sum = model
        .trees
        .iter()
        .map(|t| t.nodes[0].node_value)
        .fold(S::zero(), |a, b| a + b);
    model.base_margin + model.learning_rate * tree_sum
}

/// Path-dependent tree SHAP of the full ensemble at one input, in margin
/// units: per-tree conditional expectations weighted by training covers,
/// scaled by the learning rate and summed.
pub fn tree_shap<S: Scalar>(model: &GbmModel<S>, x: &[S]) -> Result<ShapVector<S>> {
    model.check_len(x)?;
    check_covers(model)?;
    let p = model.n_features();
    let mut phi = vec![S::zero(); p];
    for tree in &model.trees {
        if tree.nodes[0].is_leaf {
            continue;
        }
        tree_recurse(
            tree,
            x,
            &mut phi,
            0,
            0,
            Vec::with_capacity(tree.max_depth() + 2),
            S::one(),
            S::one(),
            usize::MAX & 0x7fff_ffff,
        );
    }
    let lr = model.learning_rate;
    Ok(ShapVector {
        values: phi.into_iter().map(|v| lr * v).collect(),
        base_value: expected_margin(model),
    })
}

/// One [`tree_shap`] row per cohort row, computed in parallel with row
/// order preserved.
pub fn build_shap_matrix<S: Scalar>(model: &GbmModel<S>, cohort: &Cohort<S>) -> Result<ShapMatrix<S>> {
    if cohort.n_features() != model.n_features() {
        return Err(Error::LengthMismatch {
            context: "cohort columns vs model features".into(),
            expected: model.n_features(),
            got: cohort.n_features(),
        });
    }
    check_covers(model)?;
    let rows: Vec<ShapVector<S>> = (0..cohort.n_samples())
        .into_par_iter()
        .map(|r| {
            let row = cohort.features.row(r);
            tree_shap(model, row.as_slice().expect("contiguous row"))
        })
        .collect::<Result<_>>()?;

    let mut values = Array2::zeros((cohort.n_samples(), model.n_features()));
    let mut base_values = Vec::with_capacity(rows.len());
    for (r, sv) in rows.into_iter().enumerate() {
        for (c, v) in sv.values.into_iter().enumerate() {
            values[[r, c]] = v;
        }
        base_values.push(sv.base_value);
    }
    Ok(ShapMatrix {
        values,
        base_values,
        feature_names: model.feature_names.clone(),
    })
}

/// Mean absolute attribution per feature over the given rows.
pub fn mean_abs_attribution<S: Scalar>(matrix: &ArrayView2<S>, rows: Option<&[usize]>) -> Vec<S> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..matrix.nrows()).collect();
            &all
        }
    };
    let denom = S::from_count(rows.len().max(1));
    (0..matrix.ncols())
        .map(|c| {
            rows.iter()
                .map(|&r| matrix[[r, c]].abs())
                .fold(S::zero(), |a, b| a + b)
                / denom
        })
        .collect()
}

/// Features ranked by mean |attribution|, descending; ties break toward
/// the lower feature index.
pub fn global_importance<S: Scalar>(matrix: &ShapMatrix<S>) -> Vec<(String, S)> {
    rank_importance(
        &matrix.feature_names,
        &mean_abs_attribution(&matrix.values.view(), None),
    )
}

/// [`global_importance`] restricted to a subset of rows (e.g. one
/// phenotype's patients).
pub fn importance_for_rows<S: Scalar>(matrix: &ShapMatrix<S>, rows: &[usize]) -> Vec<(String, S)> {
    rank_importance(
        &matrix.feature_names,
        &mean_abs_attribution(&matrix.values.view(), Some(rows)),
    )
}

fn rank_importance<S: Scalar>(names: &[String], scores: &[S]) -> Vec<(String, S)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| (names[i].clone(), scores[i]))
        .collect()
}

/// Exact Shapley values by subset enumeration against the interventional
/// value function: `v(S)` is the background-mean of `predict` with the
/// features outside `S` replaced by background values. Exponential in the
/// feature count, gated at 15.
pub fn exact_shapley_oracle<S: Scalar>(
    predict: &dyn Fn(&[S]) -> S,
    x: &[S],
    background: &ArrayView2<S>,
    p: usize,
) -> Result<ShapVector<S>> {
    if p > 15 {
        return Err(Error::invalid("p", "subset enumeration is gated at 15 features"));
    }
    if x.len() != p || background.ncols() != p {
        return Err(Error::LengthMismatch {
            context: "oracle feature count".into(),
            expected: p,
            got: x.len(),
        });
    }
    if background.nrows() == 0 {
        return Err(Error::invalid("background", "needs at least one row"));
    }

    let n_masks = 1usize << p;
    let n_bg = background.nrows();
    let mut v = vec![S::zero(); n_masks];
    let mut blended = vec![S::zero(); p];
    for (mask, value) in v.iter_mut().enumerate() {
        let mut acc = S::zero();
        for b in 0..n_bg {
            for j in 0..p {
                blended[j] = if mask & (1 << j) != 0 {
                    x[j]
                } else {
                    background[[b, j]]
                };
            }
            acc = acc + predict(&blended);
        }
        *value = acc / S::from_count(n_bg);
    }

    Ok(shapley_from_game(&v, p))
}

/// Exact Shapley values by subset enumeration against the ensemble's own
/// cover-weighted conditional-expectation game: when a split feature is in
/// the coalition the input's branch is followed, otherwise both children
/// contribute in proportion to their training cover. This is the game the
/// polynomial-time path algorithm solves, so [`tree_shap`] must agree with
/// it to numerical precision.
pub fn exact_conditional_oracle<S: Scalar>(model: &GbmModel<S>, x: &[S]) -> Result<ShapVector<S>> {
    let p = model.n_features();
    if p > 15 {
        return Err(Error::invalid("p", "subset enumeration is gated at 15 features"));
    }
    model.check_len(x)?;
    check_covers(model)?;

    fn cond_value<S: Scalar>(tree: &RegressionTree<S>, x: &[S], node_idx: usize, mask: usize) -> S {
        let node = &tree.nodes[node_idx];
        if node.is_leaf {
            return node.leaf_value;
        }
        if mask & (1 << node.feature) != 0 {
            let v = x[node.feature];
            let go_left = if v.is_nan() { node.default_left } else { v < node.threshold };
            let child = if go_left { node.left } else { node.right };
            cond_value(tree, x, child, mask)
        } else {
            let l = &tree.nodes[node.left];
            let r = &tree.nodes[node.right];
            (l.cover * cond_value(tree, x, node.left, mask)
                + r.cover * cond_value(tree, x, node.right, mask))
                / node.cover
        }
    }

    let n_masks = 1usize << p;
    let mut v = vec![S::zero(); n_masks];
    for (mask, value) in v.iter_mut().enumerate() {
        let tree_sum = model
            .trees
            .iter()
            .map(|t| cond_value(t, x, 0, mask))
            .fold(S::zero(), |a, b| a + b);
        *value = model.base_margin + model.learning_rate * tree_sum;
    }

    Ok(shapley_from_game(&v, p))
}

/// Shapley values of an explicit coalition game given as `v[mask]`.
fn shapley_from_game<S: Scalar>(v: &[S], p: usize) -> ShapVector<S> {
    let mut factorial = vec![1.0f64; p + 1];
    for i in 1..=p {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weights: Vec<S> = (0..p)
        .map(|s| S::cast(factorial[s] * factorial[p - s - 1] / factorial[p]))
        .collect();

    let mut values = vec![S::zero(); p];
    for (mask, &v_mask) in v.iter().enumerate() {
        let size = mask.count_ones() as usize;
        for (j, value) in values.iter_mut().enumerate() {
            if mask & (1 << j) == 0 {
                *value = *value + weights[size] * (v[mask | (1 << j)] - v_mask);
            }
        }
    }
    ShapVector {
        values,
        base_value: v[0],
    }
}
