//! Ward-linkage agglomerative clustering over explanation space, tree
//! cutting, and correct-rate evaluation against ground-truth phenotypes.
//!
//! Merge heights are Ward variance increases,
//! `d(a,b) = |a||b|/(|a|+|b|) * ||centroid_a - centroid_b||^2`, maintained
//! incrementally with the Lance-Williams recurrence and driven by the
//! nearest-neighbor-chain algorithm (O(N^2) time and memory).

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::models::gbm::GbmModel;
use crate::scalar::Scalar;
use crate::shap::{build_shap_matrix, ShapMatrix};

/// One agglomeration step. Cluster ids follow the usual convention:
/// `0..leaf_count` are input rows, `leaf_count + i` is the cluster formed
/// by merge `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge<S: Scalar> {
    pub cluster_a: usize,
    pub cluster_b: usize,
    pub height: S,
    pub new_size: usize,
}

/// Full merge tree of a Ward clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram<S: Scalar> {
    pub merges: Vec<Merge<S>>,
    pub leaf_count: usize,
}

/// A k-cut labeling of the rows; ids run 1..=k, numbered by the smallest
/// row index each cluster contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

/// Per-cluster agreement with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCorrectRate<S: Scalar> {
    pub cluster: usize,
    pub majority: String,
    pub correct_rate: S,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectRateReport<S: Scalar> {
    pub per_cluster: Vec<ClusterCorrectRate<S>>,
    /// Size-weighted mean of the per-cluster rates.
    pub overall: S,
}

fn condensed_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Ward clustering of the rows of `points`.
pub fn ward_cluster<S: Scalar>(points: &ArrayView2<S>) -> Result<Dendrogram<S>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::invalid("points", "need at least 2 rows to cluster"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "clustering input".into(),
        });
    }

    // Condensed matrix of Ward distances between singletons: d = ||a-b||^2 / 2.
    // Rows are computed in parallel (pairwise distances are pure), then
    // copied into place in index order.
    let mut dist = vec![S::zero(); n * (n - 1) / 2];
    let rows: Vec<Vec<S>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = points.row(i);
            ((i + 1)..n)
                .map(|j| {
                    let rj = points.row(j);
                    let mut acc = S::zero();
                    for c in 0..points.ncols() {
                        let d = ri[c] - rj[c];
                        acc = acc + d * d;
                    }
                    acc * S::half()
                })
                .collect()
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        let base = condensed_index(i, i + 1, n);
        dist[base..base + row.len()].copy_from_slice(&row);
    }

    let d = |dist: &[S], a: usize, b: usize| -> S {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        dist[condensed_index(lo, hi, n)]
    };

    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    // NN-chain merge log: representative leaves, height, merged size.
    let mut raw_merges: Vec<(usize, usize, S, usize)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);

    for _ in 0..n - 1 {
        if chain.is_empty() {
            let start = (0..n).find(|&i| active[i]).expect("active cluster");
            chain.push(start);
        }
        loop {
            let current = *chain.last().unwrap();
            // nearest active neighbor, lowest index on ties
            let mut nearest = None;
            let mut best = S::infinity();
            for cand in 0..n {
                if cand == current || !active[cand] {
                    continue;
                }
                let dd = d(&dist, current, cand);
                if dd < best {
                    best = dd;
                    nearest = Some(cand);
                }
            }
            let nearest = nearest.expect("at least two active clusters");
            if chain.len() >= 2 && chain[chain.len() - 2] == nearest {
                // mutual nearest neighbors: merge
                chain.pop();
                let other = chain.pop().unwrap();
                let (a, b) = if current < other { (current, other) } else { (other, current) };
                let height = d(&dist, a, b);
                let merged_size = size[a] + size[b];
                raw_merges.push((a, b, height, merged_size));

                // Lance-Williams update into slot `a`; slot `b` retires.
                let (sa, sb) = (S::from_count(size[a]), S::from_count(size[b]));
                for k in 0..n {
                    if !active[k] || k == a || k == b {
                        continue;
                    }
                    let sk = S::from_count(size[k]);
                    let total = sa + sb + sk;
                    let updated = ((sa + sk) * d(&dist, a, k) + (sb + sk) * d(&dist, b, k)
                        - sk * height)
                        / total;
                    let (lo, hi) = if a < k { (a, k) } else { (k, a) };
                    dist[condensed_index(lo, hi, n)] = updated;
                }
                active[b] = false;
                size[a] = merged_size;
                break;
            }
            chain.push(nearest);
        }
    }

    // NN-chain emits merges out of height order; sort (stable) and relabel
    // with a union-find keyed by representative leaves.
    let mut order: Vec<usize> = (0..raw_merges.len()).collect();
    order.sort_by(|&x, &y| {
        raw_merges[x]
            .2
            .partial_cmp(&raw_merges[y].2)
            .unwrap()
            .then(x.cmp(&y))
    });

    let mut parent: Vec<usize> = (0..n).collect();
    let mut cluster_id: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let mut merges = Vec::with_capacity(raw_merges.len());
    for (t, &idx) in order.iter().enumerate() {
        let (ra, rb, height, new_size) = raw_merges[idx];
        let root_a = find(&mut parent, ra);
        let root_b = find(&mut parent, rb);
        let (ca, cb) = (cluster_id[root_a], cluster_id[root_b]);
        let (cluster_a, cluster_b) = if ca < cb { (ca, cb) } else { (cb, ca) };
        merges.push(Merge {
            cluster_a,
            cluster_b,
            height,
            new_size,
        });
        parent[root_b] = root_a;
        cluster_id[root_a] = n + t;
    }

    Ok(Dendrogram {
        merges,
        leaf_count: n,
    })
}

/// Undoes the last `k - 1` merges and labels the remaining components
/// 1..=k by their smallest contained row index.
pub fn cut_tree<S: Scalar>(dendrogram: &Dendrogram<S>, k: usize) -> Result<ClusterAssignment> {
    let n = dendrogram.leaf_count;
    if k == 0 || k > n {
        return Err(Error::invalid("k", format!("must lie in 1..={n}")));
    }

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    // members[id - n] caches a representative leaf per formed cluster
    let mut rep: Vec<usize> = Vec::with_capacity(dendrogram.merges.len());
    let leaf_rep = |rep: &Vec<usize>, id: usize| -> usize {
        if id < n {
            id
        } else {
            rep[id - n]
        }
    };
    for merge in dendrogram.merges.iter().take(n - k) {
        let la = leaf_rep(&rep, merge.cluster_a);
        let lb = leaf_rep(&rep, merge.cluster_b);
        let root_a = find(&mut parent, la);
        let root_b = find(&mut parent, lb);
        parent[root_b] = root_a;
        rep.push(la);
    }
    while rep.len() < dendrogram.merges.len() {
        // unused entries for merges above the cut; keep indices aligned
        rep.push(0);
    }

    // smallest row index per component, then 1..=k in that order
    let mut min_row: BTreeMap<usize, usize> = BTreeMap::new();
    for row in 0..n {
        let root = find(&mut parent, row);
        min_row.entry(root).and_modify(|m| *m = (*m).min(row)).or_insert(row);
    }
    let mut components: Vec<(usize, usize)> = min_row.into_iter().map(|(root, m)| (m, root)).collect();
    components.sort_unstable();
    let id_of_root: BTreeMap<usize, usize> = components
        .iter()
        .enumerate()
        .map(|(i, &(_, root))| (root, i + 1))
        .collect();

    let labels: Vec<usize> = (0..n).map(|row| id_of_root[&find(&mut parent, row)]).collect();
    Ok(ClusterAssignment { labels, k })
}

/// Correct rate per cluster: the fraction of members whose true phenotype
/// equals the cluster's modal phenotype (ties broken toward the
/// lexicographically smallest name), plus the size-weighted overall rate.
pub fn correct_rate<S: Scalar>(
    assignment: &ClusterAssignment,
    truth: &[String],
) -> Result<CorrectRateReport<S>> {
    if truth.len() != assignment.labels.len() {
        return Err(Error::LengthMismatch {
            context: "cluster labels vs phenotype truth".into(),
            expected: assignment.labels.len(),
            got: truth.len(),
        });
    }
    let mut per_cluster = Vec::with_capacity(assignment.k);
    let mut correct_total = 0usize;
    for cluster in 1..=assignment.k {
        let members: Vec<usize> = (0..truth.len())
            .filter(|&i| assignment.labels[i] == cluster)
            .collect();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &members {
            *counts.entry(truth[i].as_str()).or_insert(0) += 1;
        }
        let (majority, majority_count) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&name, &count)| (name.to_string(), count))
            .unwrap_or_default();
        correct_total += majority_count;
        per_cluster.push(ClusterCorrectRate {
            cluster,
            majority,
            correct_rate: S::from_count(majority_count) / S::from_count(members.len().max(1)),
            size: members.len(),
        });
    }
    Ok(CorrectRateReport {
        per_cluster,
        overall: S::from_count(correct_total) / S::from_count(truth.len().max(1)),
    })
}

/// Per-column z-scoring for the raw-feature clustering arm (constant
/// columns map to zero).
pub fn zscore_columns<S: Scalar>(points: &ArrayView2<S>) -> ndarray::Array2<S> {
    let n = points.nrows();
    let n_s = S::from_count(n.max(1));
    let mut out = points.to_owned();
    for c in 0..points.ncols() {
        let mean = points.column(c).iter().copied().sum::<S>() / n_s;
        let var = points
            .column(c)
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<S>()
            / n_s;
        let std = var.sqrt();
        for r in 0..n {
            out[[r, c]] = if std > S::zero() {
                (points[[r, c]] - mean) / std
            } else {
                S::zero()
            };
        }
    }
    out
}

/// Paired correct-rate reports for one cut size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceComparison<S: Scalar> {
    pub k: usize,
    /// Clustering of the z-scored raw feature rows.
    pub raw: CorrectRateReport<S>,
    /// Clustering of the SHAP rows (unscaled; shared margin units).
    pub shap: CorrectRateReport<S>,
}

/// Clusters the raw feature space and the explanation space side by side
/// over a sweep of cut sizes. The default sweep is 2..=6.
pub fn compare_spaces_with_matrix<S: Scalar>(
    cohort: &Cohort<S>,
    shap: &ShapMatrix<S>,
    ks: &[usize],
) -> Result<Vec<SpaceComparison<S>>> {
    let truth = cohort
        .phenotype
        .as_ref()
        .ok_or_else(|| Error::invalid("cohort", "ground-truth phenotypes required"))?;
    if shap.n_rows() != cohort.n_samples() {
        return Err(Error::LengthMismatch {
            context: "shap rows vs cohort rows".into(),
            expected: cohort.n_samples(),
            got: shap.n_rows(),
        });
    }
    let raw_scaled = zscore_columns(&cohort.features.view());
    let raw_tree = ward_cluster(&raw_scaled.view())?;
    let shap_tree = ward_cluster(&shap.values.view())?;

    ks.iter()
        .map(|&k| {
            let raw_cut = cut_tree(&raw_tree, k)?;
            let shap_cut = cut_tree(&shap_tree, k)?;
            Ok(SpaceComparison {
                k,
                raw: correct_rate(&raw_cut, truth)?,
                shap: correct_rate(&shap_cut, truth)?,
            })
        })
        .collect()
}

pub const DEFAULT_K_SWEEP: [usize; 5] = [2, 3, 4, 5, 6];

/// [`compare_spaces_with_matrix`] with the explanation matrix computed
/// from the model on the spot.
pub fn compare_spaces<S: Scalar>(
    cohort: &Cohort<S>,
    model: &GbmModel<S>,
    ks: &[usize],
) -> Result<Vec<SpaceComparison<S>>> {
    let shap = build_shap_matrix(model, cohort)?;
    compare_spaces_with_matrix(cohort, &shap, ks)
}
