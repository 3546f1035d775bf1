//! Gradient boosting with second-order logistic loss and exact greedy
//! regression trees.
//!
//! Per round, with current probabilities p: gradients g = p - y, hessians
//! h = p(1 - p); splits maximize the regularized gain
//! `0.5 * (GL^2/(HL+l2) + GR^2/(HR+l2) - GP^2/(HP+l2))` and leaves take
//! `-G/(H+l2)`. NaN feature values are routed to the gain-maximizing child
//! at training time and follow that stored direction at prediction time.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::scalar::{logit, sigmoid, Scalar};

/// One node of a fitted regression tree. `cover` is the hessian sum of the
/// training rows routed through the node; `node_value` is the
/// cover-weighted mean leaf value of the subtree (the conditional
/// expectation the explanation pass conditions on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode<S: Scalar> {
    pub feature: usize,
    pub threshold: S,
    pub left: usize,
    pub right: usize,
    pub is_leaf: bool,
    pub leaf_value: S,
    pub cover: S,
    pub node_value: S,
    pub default_left: bool,
}

impl<S: Scalar> TreeNode<S> {
    fn leaf(leaf_value: S, cover: S) -> Self {
        TreeNode {
            feature: 0,
            threshold: S::zero(),
            left: 0,
            right: 0,
            is_leaf: true,
            leaf_value,
            cover,
            node_value: leaf_value,
            default_left: true,
        }
    }
}

/// A binary regression tree stored as a node array, root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree<S: Scalar> {
    pub nodes: Vec<TreeNode<S>>,
}

impl<S: Scalar> RegressionTree<S> {
    /// Raw margin contribution of this tree (before the learning rate).
    pub fn predict_margin(&self, x: &[S]) -> S {
        let mut idx = 0;
        loop {
            let node = &self.nodes[idx];
            if node.is_leaf {
                return node.leaf_value;
            }
            let v = x[node.feature];
            let go_left = if v.is_nan() { node.default_left } else { v < node.threshold };
            idx = if go_left { node.left } else { node.right };
        }
    }

    pub fn max_depth(&self) -> usize {
        fn depth<S: Scalar>(nodes: &[TreeNode<S>], idx: usize) -> usize {
            let n = &nodes[idx];
            if n.is_leaf {
                0
            } else {
                1 + depth(nodes, n.left).max(depth(nodes, n.right))
            }
        }
        depth(&self.nodes, 0)
    }
}

/// Boosted ensemble over logistic loss. The margin of an input is
/// `base_margin + learning_rate * sum(tree outputs)`; the probability is
/// the logistic of the margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel<S: Scalar> {
    pub trees: Vec<RegressionTree<S>>,
    pub learning_rate: S,
    /// Log-odds of the training prevalence.
    pub base_margin: S,
    pub feature_names: Vec<String>,
}

impl<S: Scalar> GbmModel<S> {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn check_len(&self, x: &[S]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::LengthMismatch {
                context: "feature vector vs model".into(),
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Log-odds margin at `x`.
    pub fn margin(&self, x: &[S]) -> Result<S> {
        self.check_len(x)?;
        let sum = self
            .trees
            .iter()
            .map(|t| t.predict_margin(x))
            .fold(S::zero(), |a, b| a + b);
        Ok(self.base_margin + self.learning_rate * sum)
    }

    pub fn predict_proba(&self, x: &[S]) -> Result<S> {
        Ok(sigmoid(self.margin(x)?))
    }

    /// Probabilities for every row of a feature matrix.
    pub fn predict_proba_matrix(&self, features: &Array2<S>) -> Result<Vec<S>> {
        let mut out = Vec::with_capacity(features.nrows());
        for row in features.rows() {
            out.push(self.predict_proba(row.as_slice().expect("contiguous row"))?);
        }
        Ok(out)
    }
}

impl<S: Scalar> Classifier<S> for GbmModel<S> {
    fn predict_proba(&self, x: &[S]) -> Result<S> {
        GbmModel::predict_proba(self, x)
    }

    fn n_features(&self) -> usize {
        GbmModel::n_features(self)
    }
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub l2_leaf: f64,
    pub subsample_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 300,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples_leaf: 5,
            l2_leaf: 1.0,
            subsample_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::invalid("max_depth", "must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::invalid("min_samples_leaf", "must be at least 1"));
        }
        if self.l2_leaf < 0.0 {
            return Err(Error::invalid("l2_leaf", "must be non-negative"));
        }
        if !(0.0 < self.subsample_fraction && self.subsample_fraction <= 1.0) {
            return Err(Error::invalid("subsample_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

const NO_NODE: u32 = u32::MAX;

struct SplitCandidate<S> {
    gain: S,
    feature: usize,
    threshold: S,
    default_left: bool,
}

#[derive(Clone, Copy)]
struct NodeStats<S: Copy> {
    g: S,
    h: S,
    count: usize,
    depth: usize,
}

/// Midpoint between two consecutive distinct sorted values, nudged so that
/// `lo < mid <= hi` even when rounding collapses the average onto `lo`.
fn split_midpoint<S: Scalar>(lo: S, hi: S) -> S {
    let mid = (lo + hi) * S::half();
    if mid <= lo {
        hi
    } else {
        mid
    }
}

fn gain_term<S: Scalar>(g: S, h: S, l2: S) -> S {
    g * g / (h + l2)
}

/// Fits `config.n_trees` trees by second-order boosting on logistic loss.
/// Deterministic given the config seed.
pub fn train_gbm<S: Scalar>(cohort: &Cohort<S>, config: &TrainConfig) -> Result<GbmModel<S>> {
    cohort.validate()?;
    config.validate()?;
    let n = cohort.n_samples();
    let p = cohort.n_features();
    if n < 2 {
        return Err(Error::invalid("cohort", "need at least 2 samples"));
    }
    let n_pos = cohort.labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass);
    }
    if cohort.features.iter().any(|v| v.is_infinite()) {
        return Err(Error::NonFinite {
            context: "feature matrix (infinite value; encode missing as NaN)".into(),
        });
    }

    let features = &cohort.features;
    // Presorted per-feature row lists; NaN rows tracked separately.
    let mut sorted_rows: Vec<Vec<u32>> = Vec::with_capacity(p);
    let mut missing_rows: Vec<Vec<u32>> = Vec::with_capacity(p);
    for f in 0..p {
        let mut present: Vec<u32> = Vec::with_capacity(n);
        let mut missing = Vec::new();
        for r in 0..n {
            if features[[r, f]].is_nan() {
                missing.push(r as u32);
            } else {
                present.push(r as u32);
            }
        }
        present.sort_by(|&a, &b| {
            features[[a as usize, f]]
                .partial_cmp(&features[[b as usize, f]])
                .unwrap()
                .then(a.cmp(&b))
        });
        sorted_rows.push(present);
        missing_rows.push(missing);
    }

    let prevalence = S::from_count(n_pos) / S::from_count(n);
    let base_margin = logit(prevalence);
    let lr = S::cast(config.learning_rate);
    let l2 = S::cast(config.l2_leaf);
    let mut margins = vec![base_margin; n];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut all_rows: Vec<u32> = (0..n as u32).collect();

    let mut trees = Vec::with_capacity(config.n_trees);
    for _ in 0..config.n_trees {
        let g: Vec<S> = (0..n)
            .map(|r| sigmoid(margins[r]) - S::from_count(cohort.labels[r] as usize))
            .collect();
        let h: Vec<S> = (0..n)
            .map(|r| {
                let pr = sigmoid(margins[r]);
                pr * (S::one() - pr)
            })
            .collect();

        let sampled: Vec<u32> = if config.subsample_fraction < 1.0 {
            let m = ((n as f64 * config.subsample_fraction).round() as usize).clamp(1, n);
            let (chosen, _) = all_rows.partial_shuffle(&mut rng, m);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            chosen
        } else {
            all_rows.clone()
        };

        let tree = build_tree(
            features,
            &sorted_rows,
            &missing_rows,
            &sampled,
            &g,
            &h,
            config,
            l2,
        );
        for r in 0..n {
            let row = cohort.features.row(r);
            margins[r] = margins[r] + lr * tree.predict_margin(row.as_slice().expect("contiguous"));
        }
        trees.push(tree);
    }

    Ok(GbmModel {
        trees,
        learning_rate: lr,
        base_margin,
        feature_names: cohort.feature_names.clone(),
    })
}

#[allow(clippy::too_many_arguments)]
fn build_tree<S: Scalar>(
    features: &Array2<S>,
    sorted_rows: &[Vec<u32>],
    missing_rows: &[Vec<u32>],
    sampled: &[u32],
    g: &[S],
    h: &[S],
    config: &TrainConfig,
    l2: S,
) -> RegressionTree<S> {
    let n = features.nrows();
    let p = features.ncols();
    let mut leaf_of_row = vec![NO_NODE; n];
    let mut root = NodeStats {
        g: S::zero(),
        h: S::zero(),
        count: 0,
        depth: 0,
    };
    for &r in sampled {
        let r = r as usize;
        leaf_of_row[r] = 0;
        root.g = root.g + g[r];
        root.h = root.h + h[r];
        root.count += 1;
    }

    let mut nodes: Vec<TreeNode<S>> = vec![TreeNode::leaf(S::zero(), root.h)];
    let mut stats: Vec<NodeStats<S>> = vec![root];
    let mut frontier: Vec<usize> = vec![0];

    while !frontier.is_empty() {
        // Slot lookup: node id -> position in the frontier.
        let mut slot_of_node = vec![usize::MAX; nodes.len()];
        for (slot, &node) in frontier.iter().enumerate() {
            slot_of_node[node] = slot;
        }
        let n_slots = frontier.len();
        let mut best: Vec<Option<SplitCandidate<S>>> = (0..n_slots).map(|_| None).collect();

        for f in 0..p {
            // Missing-value stats per frontier node for this feature.
            let mut miss = vec![(S::zero(), S::zero(), 0usize); n_slots];
            for &r in &missing_rows[f] {
                let r = r as usize;
                let node = leaf_of_row[r];
                if node == NO_NODE {
                    continue;
                }
                let slot = slot_of_node[node as usize];
                if slot == usize::MAX {
                    continue;
                }
                miss[slot].0 = miss[slot].0 + g[r];
                miss[slot].1 = miss[slot].1 + h[r];
                miss[slot].2 += 1;
            }

            // One ascending scan over the presorted rows evaluates every
            // frontier node's candidate splits on this feature.
            let mut acc: Vec<(S, S, usize, Option<S>)> =
                vec![(S::zero(), S::zero(), 0, None); n_slots];
            for &r in &sorted_rows[f] {
                let r = r as usize;
                let node = leaf_of_row[r];
                if node == NO_NODE {
                    continue;
                }
                let slot = slot_of_node[node as usize];
                if slot == usize::MAX {
                    continue;
                }
                let value = features[[r, f]];
                let (g_acc, h_acc, cnt, last) = acc[slot];
                if let Some(last_value) = last {
                    if value > last_value {
                        let threshold = split_midpoint(last_value, value);
                        let total = &stats[frontier[slot]];
                        let (gm, hm, cm) = miss[slot];
                        // missing routed left, then right
                        for (default_left, gl, hl, cl) in [
                            (true, g_acc + gm, h_acc + hm, cnt + cm),
                            (false, g_acc, h_acc, cnt),
                        ] {
                            let cr = total.count - cl;
                            if cl < config.min_samples_leaf || cr < config.min_samples_leaf {
                                continue;
                            }
                            let gr = total.g - gl;
                            let hr = total.h - hl;
                            let gain = S::half()
                                * (gain_term(gl, hl, l2) + gain_term(gr, hr, l2)
                                    - gain_term(total.g, total.h, l2));
                            let better = match &best[slot] {
                                Some(b) => gain > b.gain,
                                None => gain > S::zero(),
                            };
                            if better {
                                best[slot] = Some(SplitCandidate {
                                    gain,
                                    feature: f,
                                    threshold,
                                    default_left,
                                });
                            }
                        }
                    }
                }
                acc[slot] = (g_acc + g[r], h_acc + h[r], cnt + 1, Some(value));
            }
        }

        // Apply the chosen splits and build the next frontier.
        let mut next_frontier = Vec::new();
        for (slot, &node_id) in frontier.iter().enumerate() {
            let NodeStats { g: tg, h: th, count: _, depth } = stats[node_id];
            match best[slot].take() {
                Some(cand) => {
                    let left_id = nodes.len();
                    let right_id = nodes.len() + 1;
                    nodes[node_id].is_leaf = false;
                    nodes[node_id].feature = cand.feature;
                    nodes[node_id].threshold = cand.threshold;
                    nodes[node_id].left = left_id;
                    nodes[node_id].right = right_id;
                    nodes[node_id].default_left = cand.default_left;

                    let mut left = NodeStats {
                        g: S::zero(),
                        h: S::zero(),
                        count: 0,
                        depth: depth + 1,
                    };
                    let mut right = NodeStats {
                        g: S::zero(),
                        h: S::zero(),
                        count: 0,
                        depth: depth + 1,
                    };
                    for r in 0..n {
                        if leaf_of_row[r] != node_id as u32 {
                            continue;
                        }
                        let v = features[[r, cand.feature]];
                        let go_left = if v.is_nan() { cand.default_left } else { v < cand.threshold };
                        let (child, side) = if go_left {
                            (left_id, &mut left)
                        } else {
                            (right_id, &mut right)
                        };
                        leaf_of_row[r] = child as u32;
                        side.g = side.g + g[r];
                        side.h = side.h + h[r];
                        side.count += 1;
                    }
                    for (child_id, child) in [(left_id, left), (right_id, right)] {
                        let leaf_value = -child.g / (child.h + l2);
                        nodes.push(TreeNode::leaf(leaf_value, child.h));
                        let grow = child.depth < config.max_depth
                            && child.count >= 2 * config.min_samples_leaf;
                        if grow {
                            next_frontier.push(child_id);
                        }
                        stats.push(child);
                    }
                }
                None => {
                    nodes[node_id].is_leaf = true;
                    nodes[node_id].leaf_value = -tg / (th + l2);
                    nodes[node_id].node_value = nodes[node_id].leaf_value;
                }
            }
        }
        frontier = next_frontier;
    }

    // Cover-weighted subtree means; children always follow their parent in
    // the node array.
    for idx in (0..nodes.len()).rev() {
        if nodes[idx].is_leaf {
            nodes[idx].node_value = nodes[idx].leaf_value;
        } else {
            let l = &nodes[nodes[idx].left];
            let r = &nodes[nodes[idx].right];
            let total = l.cover + r.cover;
            nodes[idx].node_value = (l.cover * l.node_value + r.cover * r.node_value) / total;
        }
    }

    RegressionTree { nodes }
}
