//! Principal-component projection via singular value decomposition.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::embed::{EmbedMethod, Embedding2D};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Centers the columns and projects onto the top right singular vectors.
/// Each component's sign is fixed so its largest-magnitude loading is
/// positive. Rank-deficient input simply yields zero variance on the
/// trailing components.
pub fn pca_project<S: Scalar>(points: &ArrayView2<S>, dims: usize) -> Result<Embedding2D<S>> {
    let n = points.nrows();
    let p = points.ncols();
    if n < 2 {
        return Err(Error::invalid("points", "need at least 2 rows"));
    }
    if dims == 0 || dims > p {
        return Err(Error::invalid("dims", format!("must lie in 1..={p}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "pca input".into(),
        });
    }

    // Work in f64 regardless of the storage scalar.
    let mut centered = DMatrix::<f64>::zeros(n, p);
    for c in 0..p {
        let mean = points.column(c).iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        for r in 0..n {
            centered[(r, c)] = points[[r, c]].as_f64() - mean;
        }
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    for d in 0..dims {
        let mut comp: Vec<f64> = if d < v_t.nrows() {
            (0..p).map(|c| v_t[(d, c)]).collect()
        } else {
            vec![0.0; p]
        };
        // sign convention: largest-magnitude loading positive
        let mut max_idx = 0;
        for (i, &v) in comp.iter().enumerate() {
            if v.abs() > comp[max_idx].abs() {
                max_idx = i;
            }
        }
        if comp[max_idx] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        components.push(comp);
    }

    let mut coords = Array2::zeros((n, dims));
    let mut explained_variance = vec![0.0; dims];
    for (d, comp) in components.iter().enumerate() {
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..p {
                acc += centered[(r, c)] * comp[c];
            }
            coords[[r, d]] = S::cast(acc);
            explained_variance[d] += acc * acc;
        }
        explained_variance[d] /= n as f64;
    }

    Ok(Embedding2D {
        coords,
        method: EmbedMethod::Pca {
            dims,
            explained_variance,
        },
        seed: 0,
        kl_history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn column_variance(points: &ArrayView2<f64>, c: usize) -> f64 {
        let n = points.nrows() as f64;
        let mean = points.column(c).sum() / n;
        points.column(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }

    #[test]
    fn collinear_data_has_zero_second_component() {
        let points = Array2::from_shape_fn((20, 2), |(r, c)| {
            let t = r as f64;
            if c == 0 {
                t
            } else {
                3.0 * t + 1.0
            }
        });
        let e = pca_project(&points.view(), 2).unwrap();
        let var2 = column_variance(&e.coords.view(), 1);
        assert!(var2 < 1e-18, "second component variance {var2}");
    }

    #[test]
    fn component_variances_are_ordered() {
        let mut rng = crate::synth::seeded_rng(61);
        let points = Array2::from_shape_fn((50, 5), |_| rng.gen_range(-1.0..1.0));
        let e = pca_project(&points.view(), 2).unwrap();
        assert!(
            column_variance(&e.coords.view(), 0) >= column_variance(&e.coords.view(), 1)
        );
    }

    #[test]
    fn rotated_planar_data_is_recovered_losslessly() {
        let mut rng = crate::synth::seeded_rng(62);
        let n = 40;
        // planar points (a, b, 0) rotated into 3-D
        let (s1, c1) = (0.7f64.sin(), 0.7f64.cos());
        let (s2, c2) = (0.4f64.sin(), 0.4f64.cos());
        let mut rows = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            // Rz(0.7) * Rx(0.4) applied to (a, b, 0)
            let (x0, y0, z0) = (a, b * c2, b * s2);
            let x = c1 * x0 - s1 * y0;
            let y = s1 * x0 + c1 * y0;
            rows.extend_from_slice(&[x, y, z0]);
        }
        let points = Array2::from_shape_vec((n, 3), rows).unwrap();
        let e = pca_project(&points.view(), 2).unwrap();
        let total: f64 = (0..3).map(|c| column_variance(&points.view(), c)).sum();
        let captured: f64 = match &e.method {
            EmbedMethod::Pca {
                explained_variance, ..
            } => explained_variance.iter().sum(),
            _ => unreachable!(),
        };
        assert!(
            (total - captured).abs() < 1e-9,
            "residual variance {}",
            total - captured
        );
    }

    #[test]
    fn translation_leaves_projection_unchanged() {
        let mut rng = crate::synth::seeded_rng(63);
        let points = Array2::from_shape_fn((30, 4), |_| rng.gen_range(-1.0..1.0));
        let shifted = &points + 17.5;
        let a: Embedding2D<f64> = pca_project(&points.view(), 2).unwrap();
        let b = pca_project(&shifted.view(), 2).unwrap();
        for (x, y) in a.coords.iter().zip(b.coords.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_rows_permutes_coordinates() {
        let mut rng = crate::synth::seeded_rng(64);
        let points = Array2::from_shape_fn((25, 3), |_| rng.gen_range(-1.0..1.0));
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..25).collect();
            use rand::seq::SliceRandom;
            p.shuffle(&mut rng);
            p
        };
        let mut permuted = Array2::zeros((25, 3));
        for (new_r, &old_r) in perm.iter().enumerate() {
            for c in 0..3 {
                permuted[[new_r, c]] = points[[old_r, c]];
            }
        }
        let a: Embedding2D<f64> = pca_project(&points.view(), 2).unwrap();
        let b = pca_project(&permuted.view(), 2).unwrap();
        for (new_r, &old_r) in perm.iter().enumerate() {
            for d in 0..2 {
                assert!((a.coords[[old_r, d]] - b.coords[[new_r, d]]).abs() < 1e-9);
            }
        }
    }
}
