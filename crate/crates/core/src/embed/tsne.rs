//! Exact t-SNE: per-point bandwidths matched to a target perplexity by
//! binary search, symmetrized affinities, early exaggeration, and
//! momentum gradient descent on the O(N^2) objective.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbedMethod, Embedding2D};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

const INITIAL_MOMENTUM: f64 = 0.5;
const FINAL_MOMENTUM: f64 = 0.8;
const MOMENTUM_SWITCH_ITER: usize = 250;
const KL_RECORD_EVERY: usize = 50;
const BANDWIDTH_SEARCH_STEPS: usize = 50;
const ENTROPY_TOLERANCE: f64 = 1e-5;
const MIN_PROB: f64 = 1e-12;

/// Conditional affinities of one point against the target entropy
/// `ln(perplexity)` via binary search over the Gaussian precision.
fn conditional_affinities(sq_dists: &[f64], own: usize, perplexity: f64, out: &mut [f64]) {
    let target = perplexity.ln();
    let mut beta = 1.0;
    let mut beta_min = f64::NEG_INFINITY;
    let mut beta_max = f64::INFINITY;

    for _ in 0..BANDWIDTH_SEARCH_STEPS {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, &d) in sq_dists.iter().enumerate() {
            if j == own {
                out[j] = 0.0;
                continue;
            }
            let w = (-beta * d).exp();
            out[j] = w;
            sum += w;
            weighted += d * w;
        }
        let sum = sum.max(f64::MIN_POSITIVE);
        let entropy = sum.ln() + beta * weighted / sum;
        let diff = entropy - target;
        if diff.abs() < ENTROPY_TOLERANCE {
            break;
        }
        if diff > 0.0 {
            beta_min = beta;
            beta = if beta_max.is_finite() { (beta + beta_max) / 2.0 } else { beta * 2.0 };
        } else {
            beta_max = beta;
            beta = if beta_min.is_finite() { (beta + beta_min) / 2.0 } else { beta / 2.0 };
        }
    }
    let total: f64 = out.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// [`tsne_with_config`] with per-point initialization streams, so tests can
/// match initial coordinates to point identity across row permutations.
pub fn tsne_with_point_streams<S: Scalar>(
    points: &ArrayView2<S>,
    config: &TsneConfig,
    streams: &[u64],
) -> Result<Embedding2D<S>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::invalid("points", "need at least 2 rows"));
    }
    if streams.len() != n {
        return Err(Error::LengthMismatch {
            context: "init streams vs rows".into(),
            expected: n,
            got: streams.len(),
        });
    }
    if !(config.perplexity > 0.0) || config.perplexity >= (n as f64 - 1.0) / 3.0 {
        return Err(Error::PerplexityInfeasible {
            perplexity: config.perplexity,
            n,
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "t-SNE input".into(),
        });
    }

    // Pairwise squared distances in input space (f64 workspace).
    let p_dim = points.ncols();
    let sq: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut acc = 0.0;
                    for c in 0..p_dim {
                        let d = points[[i, c]].as_f64() - points[[j, c]].as_f64();
                        acc += d * d;
                    }
                    acc
                })
                .collect()
        })
        .collect();

    // Conditional affinities, then symmetrize: p_ij = (p_j|i + p_i|j) / 2N.
    let conditionals: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            conditional_affinities(&sq[i], i, config.perplexity, &mut row);
            row
        })
        .collect();
    let mut p_true = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p_true[i * n + j] =
                    ((conditionals[i][j] + conditionals[j][i]) / (2.0 * n as f64)).max(MIN_PROB);
            }
        }
    }

    // Seeded Gaussian init, sigma = 1e-4, one stream per point.
    let mut y = vec![0.0f64; n * 2];
    for (i, &stream) in streams.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        for d in 0..2 {
            let v: f64 = StandardNormal.sample(&mut rng);
            y[i * 2 + d] = v * 1e-4;
        }
    }

    let mut velocity = vec![0.0f64; n * 2];
    let mut gains = vec![1.0f64; n * 2];
    let mut kl_history = Vec::new();
    let mut w = vec![0.0f64; n * n];

    let kl_of = |p_true: &[f64], w: &[f64], z: f64| -> f64 {
        let mut kl = 0.0;
        for idx in 0..n * n {
            let p = p_true[idx];
            if p > 0.0 && idx / n != idx % n {
                let q = (w[idx] / z).max(MIN_PROB);
                kl += p * (p / q).ln();
            }
        }
        kl
    };

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < MOMENTUM_SWITCH_ITER {
            INITIAL_MOMENTUM
        } else {
            FINAL_MOMENTUM
        };

        // Student-t kernel on current embedding.
        let chunks: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (yi0, yi1) = (y[i * 2], y[i * 2 + 1]);
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let d0 = yi0 - y[j * 2];
                            let d1 = yi1 - y[j * 2 + 1];
                            1.0 / (1.0 + d0 * d0 + d1 * d1)
                        }
                    })
                    .collect()
            })
            .collect();
        for (i, chunk) in chunks.into_iter().enumerate() {
            w[i * n..(i + 1) * n].copy_from_slice(&chunk);
        }
        let z: f64 = w.iter().sum::<f64>().max(f64::MIN_POSITIVE);

        let grads: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (yi0, yi1) = (y[i * 2], y[i * 2 + 1]);
                let mut g0 = 0.0;
                let mut g1 = 0.0;
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let wij = w[i * n + j];
                    let pij = exaggeration * p_true[i * n + j];
                    let coeff = 4.0 * (pij - wij / z) * wij;
                    g0 += coeff * (yi0 - y[j * 2]);
                    g1 += coeff * (yi1 - y[j * 2 + 1]);
                }
                (g0, g1)
            })
            .collect();

        // update with the reference adaptive per-coordinate gains
        for (i, (g0, g1)) in grads.into_iter().enumerate() {
            for (d, g) in [(0, g0), (1, g1)] {
                let idx = i * 2 + d;
                gains[idx] = if (g > 0.0) != (velocity[idx] > 0.0) {
                    gains[idx] + 0.2
                } else {
                    (gains[idx] * 0.8).max(0.01)
                };
                velocity[idx] = momentum * velocity[idx] - config.learning_rate * gains[idx] * g;
                y[idx] += velocity[idx];
            }
        }
        // re-center
        let mean0 = y.iter().step_by(2).sum::<f64>() / n as f64;
        let mean1 = y.iter().skip(1).step_by(2).sum::<f64>() / n as f64;
        for i in 0..n {
            y[i * 2] -= mean0;
            y[i * 2 + 1] -= mean1;
        }

        let iter_1 = iter + 1;
        if iter_1 % KL_RECORD_EVERY == 0 || iter_1 == config.iterations {
            // KL against the true (un-exaggerated) affinities, on the
            // freshly updated coordinates.
            let mut z_now = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let d0 = y[i * 2] - y[j * 2];
                        let d1 = y[i * 2 + 1] - y[j * 2 + 1];
                        w[i * n + j] = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                        z_now += w[i * n + j];
                    } else {
                        w[i * n + j] = 0.0;
                    }
                }
            }
            let kl = kl_of(&p_true, &w, z_now.max(f64::MIN_POSITIVE));
            if kl_history.last().map(|&(it, _)| it) != Some(iter_1) {
                kl_history.push((iter_1, kl));
            }
        }
    }

    let mut coords = Array2::zeros((n, 2));
    for i in 0..n {
        coords[[i, 0]] = S::cast(y[i * 2]);
        coords[[i, 1]] = S::cast(y[i * 2 + 1]);
    }
    Ok(Embedding2D {
        coords,
        method: EmbedMethod::Tsne(config.clone()),
        seed: config.seed,
        kl_history,
    })
}

/// Exact t-SNE with default per-point streams (the row index).
pub fn tsne_with_config<S: Scalar>(
    points: &ArrayView2<S>,
    config: &TsneConfig,
) -> Result<Embedding2D<S>> {
    let streams: Vec<u64> = (0..points.nrows() as u64).collect();
    tsne_with_point_streams(points, config, &streams)
}

/// Convenience wrapper over [`tsne_with_config`].
pub fn tsne<S: Scalar>(
    points: &ArrayView2<S>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> Result<Embedding2D<S>> {
    tsne_with_config(
        points,
        &TsneConfig {
            perplexity,
            iterations,
            seed,
            ..TsneConfig::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn blob_data(n_per: usize, centers: &[(f64, f64)], spread: f64, seed: u64) -> Array2<f64> {
        let mut rng = crate::synth::seeded_rng(seed);
        let mut rows = Vec::new();
        for &(cx, cy) in centers {
            for _ in 0..n_per {
                rows.push(cx + rng.gen_range(-spread..spread));
                rows.push(cy + rng.gen_range(-spread..spread));
            }
        }
        Array2::from_shape_vec((n_per * centers.len(), 2), rows).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_coordinates() {
        let points = blob_data(15, &[(0.0, 0.0), (10.0, 0.0)], 1.0, 71);
        let a = tsne(&points.view(), 5.0, 120, 3).unwrap();
        let b = tsne(&points.view(), 5.0, 120, 3).unwrap();
        assert_eq!(a.coords, b.coords);
        let c = tsne(&points.view(), 5.0, 120, 4).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn duplicated_rows_embed_together() {
        let mut points = blob_data(20, &[(0.0, 0.0), (8.0, 8.0)], 1.5, 72);
        for c in 0..2 {
            let v = points[[0, c]];
            points[[1, c]] = v;
        }
        // Identical rows have identical affinities, so with a shared
        // initialization stream their trajectories coincide exactly.
        let config = TsneConfig {
            perplexity: 8.0,
            iterations: 400,
            learning_rate: 50.0,
            seed: 9,
            ..TsneConfig::default()
        };
        let mut streams: Vec<u64> = (0..points.nrows() as u64).collect();
        streams[1] = streams[0];
        let e = tsne_with_point_streams(&points.view(), &config, &streams).unwrap();
        let mut diameter = 0.0f64;
        for i in 0..40 {
            for j in 0..40 {
                let d0 = e.coords[[i, 0]] - e.coords[[j, 0]];
                let d1 = e.coords[[i, 1]] - e.coords[[j, 1]];
                diameter = diameter.max((d0 * d0 + d1 * d1).sqrt());
            }
        }
        let d0 = e.coords[[0, 0]] - e.coords[[1, 0]];
        let d1 = e.coords[[0, 1]] - e.coords[[1, 1]];
        let gap = (d0 * d0 + d1 * d1).sqrt();
        assert!(gap <= 1e-3 * diameter, "gap {gap} vs diameter {diameter}");
    }

    #[test]
    fn far_separated_blobs_are_linearly_separable_in_embedding() {
        // separation 50 sigma: centers 50 apart, spread 1
        let n_per = 100;
        let points = blob_data(n_per, &[(0.0, 0.0), (50.0, 0.0)], 1.0, 73);
        let e = tsne(&points.view(), 20.0, 500, 5).unwrap();

        // 2-means on the embedding, seeded from the two most distant points
        let n = 2 * n_per;
        let coords = &e.coords;
        let mut seed_pair = (0, 1);
        let mut best = -1.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let d0 = coords[[i, 0]] - coords[[j, 0]];
                let d1 = coords[[i, 1]] - coords[[j, 1]];
                let d = d0 * d0 + d1 * d1;
                if d > best {
                    best = d;
                    seed_pair = (i, j);
                }
            }
        }
        let mut centers = [
            [coords[[seed_pair.0, 0]], coords[[seed_pair.0, 1]]],
            [coords[[seed_pair.1, 0]], coords[[seed_pair.1, 1]]],
        ];
        let mut assign = vec![0usize; n];
        for _ in 0..20 {
            for i in 0..n {
                let d = |c: &[f64; 2]| {
                    (coords[[i, 0]] - c[0]).powi(2) + (coords[[i, 1]] - c[1]).powi(2)
                };
                assign[i] = usize::from(d(&centers[1]) < d(&centers[0]));
            }
            for k in 0..2 {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
                if members.is_empty() {
                    continue;
                }
                centers[k] = [
                    members.iter().map(|&i| coords[[i, 0]]).sum::<f64>() / members.len() as f64,
                    members.iter().map(|&i| coords[[i, 1]]).sum::<f64>() / members.len() as f64,
                ];
            }
        }
        let truth: Vec<usize> = (0..n).map(|i| usize::from(i >= n_per)).collect();
        let agree = (0..n).filter(|&i| assign[i] == truth[i]).count();
        let accuracy = (agree.max(n - agree)) as f64 / n as f64;
        assert!(accuracy >= 0.99, "2-means accuracy {accuracy}");
    }

    #[test]
    fn kl_decreases_after_exaggeration_phase() {
        let points = blob_data(30, &[(0.0, 0.0), (6.0, 6.0), (12.0, 0.0)], 1.0, 74);
        let e = tsne(&points.view(), 10.0, 600, 11).unwrap();
        let at = |it: usize| {
            e.kl_history
                .iter()
                .find(|&&(i, _)| i == it)
                .map(|&(_, kl)| kl)
                .expect("recorded")
        };
        assert!(at(600) < at(250), "final {} vs 250 {}", at(600), at(250));
    }

    #[test]
    fn permutation_matched_streams_permute_coordinates() {
        // Short horizon: summation order differs under permutation, so
        // trajectories agree only up to accumulated roundoff.
        let points = blob_data(12, &[(0.0, 0.0), (9.0, 3.0)], 1.0, 75);
        let n = points.nrows();
        let config = TsneConfig {
            perplexity: 5.0,
            iterations: 25,
            learning_rate: 50.0,
            seed: 21,
            ..TsneConfig::default()
        };
        let base = tsne_with_config(&points.view(), &config).unwrap();

        let mut rng = crate::synth::seeded_rng(76);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut permuted = Array2::zeros((n, 2));
        for (new_r, &old_r) in perm.iter().enumerate() {
            for c in 0..2 {
                permuted[[new_r, c]] = points[[old_r, c]];
            }
        }
        let streams: Vec<u64> = perm.iter().map(|&old| old as u64).collect();
        let moved = tsne_with_point_streams(&permuted.view(), &config, &streams).unwrap();
        let scale = base.coords.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        for (new_r, &old_r) in perm.iter().enumerate() {
            for d in 0..2 {
                let a = base.coords[[old_r, d]];
                let b = moved.coords[[new_r, d]];
                assert!(
                    (a - b).abs() <= 1e-4 * scale.max(1e-9),
                    "row {old_r}->{new_r} dim {d}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn infeasible_perplexity_is_rejected() {
        let points = blob_data(5, &[(0.0, 0.0)], 1.0, 77);
        assert!(matches!(
            tsne(&points.view(), 30.0, 100, 0),
            Err(Error::PerplexityInfeasible { .. })
        ));
    }
}
