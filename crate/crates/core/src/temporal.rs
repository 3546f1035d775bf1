//! Preprocessing and temporal abstraction: IQR outlier cleaning, LOCF
//! imputation, sparse-variable exclusion, stage slicing, and the
//! distribution summaries that turn irregular series into flat feature
//! rows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, PatientTrajectory, Stage, TrajectoryCohort};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column suffixes of the per-variable summary block, in emitted order.
pub const SUMMARY_NAMES: [&str; 6] = ["rmin", "rmax", "median", "mean", "mad", "nobs"];

/// Linear-interpolation quantile between closest order statistics at
/// `h = (n-1)p` (the type-7 convention). Input must be sorted ascending.
pub fn quantile_sorted<S: Scalar>(sorted: &[S], p: S) -> S {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let p = p.max(S::zero()).min(S::one());
    let h = S::from_count(n - 1) * p;
    let lo = h.floor();
    let lo_idx = lo.as_f64() as usize;
    if lo_idx + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo;
    sorted[lo_idx] + frac * (sorted[lo_idx + 1] - sorted[lo_idx])
}

/// [`quantile_sorted`] on an unsorted slice.
pub fn quantile<S: Scalar>(values: &[S], p: S) -> S {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    quantile_sorted(&sorted, p)
}

fn iqr_pass<S: Scalar>(values: &[S], k: S) -> Vec<S> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let q1 = quantile_sorted(&sorted, S::cast(0.25));
    let q3 = quantile_sorted(&sorted, S::cast(0.75));
    let iqr = q3 - q1;
    let lo = q1 - k * iqr;
    let hi = q3 + k * iqr;
    values
        .iter()
        .copied()
        .filter(|&v| v >= lo && v <= hi)
        .collect()
}

/// Removes values outside `[Q1 - k*IQR, Q3 + k*IQR]`, re-deriving the
/// fences until no value falls outside them, so the result is a fixed
/// point (a single pass is not idempotent: shrinking the sample can
/// shrink the fences). Order is preserved; empty input stays empty.
pub fn clean_outliers<S: Scalar>(values: &[S], k: S) -> Vec<S> {
    assert!(k > S::zero(), "IQR multiplier must be positive");
    let mut kept = values.to_vec();
    loop {
        if kept.is_empty() {
            return kept;
        }
        let next = iqr_pass(&kept, k);
        if next.len() == kept.len() {
            return next;
        }
        kept = next;
    }
}

/// Last observation carried forward over explicitly recorded missing
/// values; leading missings take `fallback` (the cohort-wide variable
/// average upstream).
pub fn impute_locf<S: Scalar>(series: &[(S, Option<S>)], fallback: S) -> Vec<(S, S)> {
    let mut last = None;
    series
        .iter()
        .map(|&(t, v)| {
            let filled = match v {
                Some(x) => {
                    last = Some(x);
                    x
                }
                None => last.unwrap_or(fallback),
            };
            (t, filled)
        })
        .collect()
}

/// Fraction of patients with no observed value for each variable.
pub fn missing_fractions<S: Scalar>(cohort: &TrajectoryCohort<S>) -> Vec<f64> {
    let n = cohort.n_patients().max(1);
    (0..cohort.n_variables())
        .map(|v| {
            let absent = cohort
                .patients
                .iter()
                .filter(|p| p.series[v].iter().all(|(_, val)| val.is_none()))
                .count();
            absent as f64 / n as f64
        })
        .collect()
}

/// Drops every variable whose cohort-wide missing fraction exceeds
/// `threshold` (a variable counts as missing for a patient when the
/// patient has no observed value for it).
pub fn drop_sparse_variables<S: Scalar>(
    cohort: &TrajectoryCohort<S>,
    threshold: f64,
) -> Result<TrajectoryCohort<S>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::invalid("threshold", "must lie strictly between 0 and 1"));
    }
    let fractions = missing_fractions(cohort);
    let keep: Vec<usize> = (0..cohort.n_variables())
        .filter(|&v| fractions[v] <= threshold)
        .collect();
    if keep.is_empty() && cohort.n_variables() > 0 {
        return Err(Error::AllVariablesDropped);
    }
    let patients = cohort
        .patients
        .iter()
        .map(|p| PatientTrajectory {
            patient_id: p.patient_id.clone(),
            series: keep.iter().map(|&v| p.series[v].clone()).collect(),
            stages: p.stages.clone(),
            outcomes: p.outcomes.clone(),
        })
        .collect();
    Ok(TrajectoryCohort {
        patients,
        variable_names: keep
            .iter()
            .map(|&v| cohort.variable_names[v].clone())
            .collect(),
    })
}

/// Observed values of every variable inside a stage window.
///
/// Windows are closed on both ends; a point sitting exactly on a shared
/// boundary belongs to the earlier stage. Cumulative windows run from
/// t = 0 to the stage end and keep boundary points unconditionally.
/// An absent stage yields empty slices. Unobserved (missing) points are
/// skipped.
pub fn slice_stage<S: Scalar>(
    traj: &PatientTrajectory<S>,
    stage: Stage,
    cumulative: bool,
) -> Vec<Vec<S>> {
    let window = traj.stages.window(stage);
    traj.series
        .iter()
        .map(|series| {
            let Some((start, end)) = window else {
                return Vec::new();
            };
            series
                .iter()
                .filter_map(|&(t, v)| {
                    let inside = if cumulative {
                        t >= S::zero() && t <= end
                    } else {
                        t >= start && t <= end && !(t == start && traj.stages.earlier_stage_ends_at(stage, t))
                    };
                    if inside {
                        v
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

/// Distribution summary of one variable in one window: 5% / 95% quantiles,
/// median, mean, median absolute deviation, and the raw observation count
/// (measurement intensity). All value fields are `None` for an empty
/// window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary<S: Scalar> {
    pub r_min: Option<S>,
    pub r_max: Option<S>,
    pub median: Option<S>,
    pub mean: Option<S>,
    pub mad: Option<S>,
    pub n_obs: usize,
}

impl<S: Scalar> DistributionSummary<S> {
    pub fn empty() -> Self {
        Self {
            r_min: None,
            r_max: None,
            median: None,
            mean: None,
            mad: None,
            n_obs: 0,
        }
    }

    /// Fields in design-matrix column order, missing encoded as NaN.
    pub fn to_row(&self) -> [S; 6] {
        let get = |o: Option<S>| o.unwrap_or_else(S::nan);
        [
            get(self.r_min),
            get(self.r_max),
            get(self.median),
            get(self.mean),
            get(self.mad),
            S::from_count(self.n_obs),
        ]
    }
}

/// Collapses a value list into its [`DistributionSummary`].
pub fn abstract_distribution<S: Scalar>(values: &[S]) -> DistributionSummary<S> {
    if values.is_empty() {
        return DistributionSummary::empty();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let median = quantile_sorted(&sorted, S::half());
    let mut deviations: Vec<S> = sorted.iter().map(|&v| (v - median).abs()).collect();
    deviations.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = S::from_count(values.len());
    DistributionSummary {
        r_min: Some(quantile_sorted(&sorted, S::cast(0.05))),
        r_max: Some(quantile_sorted(&sorted, S::cast(0.95))),
        median: Some(median),
        mean: Some(values.iter().copied().sum::<S>() / n),
        mad: Some(quantile_sorted(&deviations, S::half())),
        n_obs: values.len(),
    }
}

/// Most severe observed outcome: the max of the label series.
pub fn abstract_outcome(outcomes: &[u8]) -> Result<u8> {
    outcomes
        .iter()
        .copied()
        .max()
        .ok_or(Error::UnlabeledPatient {
            patient: String::new(),
        })
}

/// Per-patient static feature block prepended to the summary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures<S: Scalar> {
    pub names: Vec<String>,
    /// One row per patient, aligned with the trajectory cohort.
    pub rows: Vec<Vec<S>>,
}

/// Builds the flat design matrix for one stage window: one row per
/// patient holding the optional static features followed by the six
/// summary fields of every variable (`<variable>__<summary>` columns),
/// labeled by the collapsed outcome.
pub fn build_design_matrix<S: Scalar>(
    cohort: &TrajectoryCohort<S>,
    stage: Stage,
    cumulative: bool,
    statics: Option<&StaticFeatures<S>>,
) -> Result<Cohort<S>> {
    let n = cohort.n_patients();
    if let Some(st) = statics {
        if st.rows.len() != n {
            return Err(Error::LengthMismatch {
                context: "static feature rows vs patients".into(),
                expected: n,
                got: st.rows.len(),
            });
        }
    }
    let n_static = statics.map_or(0, |s| s.names.len());
    let n_cols = n_static + SUMMARY_NAMES.len() * cohort.n_variables();

    let mut feature_names = Vec::with_capacity(n_cols);
    if let Some(st) = statics {
        feature_names.extend(st.names.iter().cloned());
    }
    for var in &cohort.variable_names {
        for summary in SUMMARY_NAMES {
            feature_names.push(format!("{var}__{summary}"));
        }
    }

    let mut features = Array2::zeros((n, n_cols));
    let mut labels = Vec::with_capacity(n);
    for (r, patient) in cohort.patients.iter().enumerate() {
        let mut c = 0;
        if let Some(st) = statics {
            if st.rows[r].len() != n_static {
                return Err(Error::LengthMismatch {
                    context: format!("static features of patient `{}`", patient.patient_id),
                    expected: n_static,
                    got: st.rows[r].len(),
                });
            }
            for &v in &st.rows[r] {
                features[[r, c]] = v;
                c += 1;
            }
        }
        for slice in slice_stage(patient, stage, cumulative) {
            for v in abstract_distribution(&slice).to_row() {
                features[[r, c]] = v;
                c += 1;
            }
        }
        let label = abstract_outcome(&patient.outcome_labels()).map_err(|_| Error::UnlabeledPatient {
            patient: patient.patient_id.clone(),
        })?;
        labels.push(label);
    }

    Ok(Cohort {
        features,
        labels,
        phenotype: None,
        feature_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StageBoundaries;

    /// Brute-force quantile oracle: direct evaluation of the
    /// order-statistic interpolation on an independently sorted copy,
    /// done in f64 regardless of S.
    fn quantile_oracle(values: &[f64], p: f64) -> f64 {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len();
        if n == 1 {
            return s[0];
        }
        let h = (n as f64 - 1.0) * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    }

    fn mad_oracle(values: &[f64]) -> f64 {
        let med = quantile_oracle(values, 0.5);
        let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
        quantile_oracle(&dev, 0.5)
    }

    #[test]
    fn quantile_matches_hand_computed_values() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.05), 1.2);
        assert_eq!(quantile(&v, 0.95), 4.8);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
    }

    #[test]
    fn abstract_distribution_matches_spec_example() {
        let s = abstract_distribution(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.r_min, Some(1.2));
        assert_eq!(s.r_max, Some(4.8));
        assert_eq!(s.median, Some(3.0));
        assert_eq!(s.mean, Some(3.0));
        assert_eq!(s.mad, Some(1.0));
        assert_eq!(s.n_obs, 5);
    }

    #[test]
    fn abstract_distribution_constant_and_empty() {
        let s = abstract_distribution(&[7.5f64, 7.5, 7.5]);
        assert_eq!(s.r_min, Some(7.5));
        assert_eq!(s.r_max, Some(7.5));
        assert_eq!(s.median, Some(7.5));
        assert_eq!(s.mean, Some(7.5));
        assert_eq!(s.mad, Some(0.0));

        let e = abstract_distribution::<f64>(&[]);
        assert_eq!(e, DistributionSummary::empty());
        assert!(e.to_row()[0].is_nan());
        assert_eq!(e.to_row()[5], 0.0);
    }

    #[test]
    fn abstract_distribution_matches_oracle_on_random_vectors() {
        let mut rng = crate::synth::seeded_rng(99);
        use rand::Rng;
        for _ in 0..200 {
            let len = rng.gen_range(1..=120);
            let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let s = abstract_distribution(&values);
            assert!((s.r_min.unwrap() - quantile_oracle(&values, 0.05)).abs() < 1e-12);
            assert!((s.r_max.unwrap() - quantile_oracle(&values, 0.95)).abs() < 1e-12);
            assert!((s.median.unwrap() - quantile_oracle(&values, 0.5)).abs() < 1e-12);
            assert!((s.mad.unwrap() - mad_oracle(&values)).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_outliers_matches_hand_computed_example() {
        assert_eq!(
            clean_outliers(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(clean_outliers(&[5.0, 5.0, 5.0], 1.5), vec![5.0, 5.0, 5.0]);
        assert_eq!(clean_outliers::<f64>(&[], 1.5), Vec::<f64>::new());
    }

    #[test]
    fn clean_outliers_is_idempotent_even_when_fences_shrink() {
        // A single pass would stop at [0,0,0,0,1,2,4,8,16]; the fixed
        // point also drops the 16.
        let v = [0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let once = clean_outliers(&v, 1.5);
        let twice = clean_outliers(&once, 1.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn locf_carries_forward_and_uses_fallback() {
        let s = impute_locf(&[(1.0, Some(5.0)), (2.0, None), (3.0, None)], 0.0);
        assert_eq!(s, vec![(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)]);

        let s = impute_locf(&[(1.0, None), (2.0, Some(7.0))], 3.0);
        assert_eq!(s, vec![(1.0, 3.0), (2.0, 7.0)]);

        let full = [(1.0, Some(1.0)), (2.0, Some(2.0))];
        assert_eq!(impute_locf(&full, 9.0), vec![(1.0, 1.0), (2.0, 2.0)]);
    }

    fn trajectory(points: &[(f64, f64)]) -> PatientTrajectory<f64> {
        PatientTrajectory {
            patient_id: "p1".into(),
            series: vec![points.iter().map(|&(t, v)| (t, Some(v))).collect()],
            stages: StageBoundaries {
                pre: Some((0.0, 10.0)),
                intra: Some((10.0, 20.0)),
                post: Some((20.0, 30.0)),
            },
            outcomes: vec![(31.0, 0), (32.0, 1)],
        }
    }

    #[test]
    fn slice_stage_handles_cumulative_and_boundaries() {
        let traj = trajectory(&[(5.0, 1.0), (10.0, 2.0), (20.0, 3.0), (25.0, 4.0)]);
        // The t=10 point sits on the pre/intra boundary: earlier stage wins.
        assert_eq!(slice_stage(&traj, Stage::Pre, false)[0], vec![1.0, 2.0]);
        assert_eq!(slice_stage(&traj, Stage::Intra, false)[0], vec![3.0]);
        assert_eq!(slice_stage(&traj, Stage::Intra, true)[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(slice_stage(&traj, Stage::Post, false)[0], vec![4.0]);

        let pre_only = trajectory(&[(1.0, 1.0), (2.0, 2.0)]);
        assert!(slice_stage(&pre_only, Stage::Intra, false)[0].is_empty());
        assert_eq!(slice_stage(&pre_only, Stage::Intra, true)[0], vec![1.0, 2.0]);

        let mut absent = trajectory(&[(1.0, 1.0)]);
        absent.stages.intra = None;
        assert!(slice_stage(&absent, Stage::Intra, false)[0].is_empty());
        assert!(slice_stage(&absent, Stage::Intra, true)[0].is_empty());
    }

    #[test]
    fn abstract_outcome_takes_max_and_rejects_empty() {
        assert_eq!(abstract_outcome(&[0, 0, 1, 0]).unwrap(), 1);
        assert_eq!(abstract_outcome(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(abstract_outcome(&[1]).unwrap(), 1);
        assert!(abstract_outcome(&[]).is_err());
    }

    fn two_patient_cohort() -> TrajectoryCohort<f64> {
        let p1 = PatientTrajectory {
            patient_id: "a".into(),
            series: vec![
                vec![(1.0, Some(1.0)), (2.0, Some(3.0))],
                vec![(1.5, Some(10.0))],
                vec![],
            ],
            stages: StageBoundaries {
                pre: Some((0.0, 5.0)),
                intra: Some((5.0, 8.0)),
                post: Some((8.0, 12.0)),
            },
            outcomes: vec![(13.0, 1)],
        };
        let p2 = PatientTrajectory {
            patient_id: "b".into(),
            series: vec![vec![(6.0, Some(2.0))], vec![], vec![(9.0, Some(4.0))]],
            stages: p1.stages.clone(),
            outcomes: vec![(13.0, 0)],
        };
        TrajectoryCohort {
            patients: vec![p1, p2],
            variable_names: vec!["hr".into(), "bp".into(), "spo2".into()],
        }
    }

    #[test]
    fn design_matrix_shape_and_columns() {
        let cohort = two_patient_cohort();
        let design = build_design_matrix(&cohort, Stage::Pre, false, None).unwrap();
        assert_eq!(design.n_samples(), 2);
        assert_eq!(design.n_features(), 18);
        assert_eq!(design.feature_names[0], "hr__rmin");
        assert_eq!(design.feature_names[5], "hr__nobs");
        assert_eq!(design.feature_names[6], "bp__rmin");
        assert_eq!(design.labels, vec![1, 0]);

        // patient b has no pre-window data: all-missing summaries, nobs 0
        assert!(design.features[[1, 0]].is_nan());
        assert_eq!(design.features[[1, 5]], 0.0);

        // row summaries match abstract_distribution on the slices directly
        let direct = abstract_distribution(&[1.0, 3.0]);
        assert_eq!(design.features[[0, 0]], direct.r_min.unwrap());
        assert_eq!(design.features[[0, 3]], direct.mean.unwrap());
    }

    #[test]
    fn design_matrix_statics_come_first() {
        let cohort = two_patient_cohort();
        let statics = StaticFeatures {
            names: vec!["age".into()],
            rows: vec![vec![70.0], vec![80.0]],
        };
        let design = build_design_matrix(&cohort, Stage::Post, true, Some(&statics)).unwrap();
        assert_eq!(design.n_features(), 19);
        assert_eq!(design.feature_names[0], "age");
        assert_eq!(design.features[[0, 0]], 70.0);
        assert_eq!(design.features[[1, 0]], 80.0);
    }

    #[test]
    fn design_matrix_propagates_unlabeled_patient() {
        let mut cohort = two_patient_cohort();
        cohort.patients[1].outcomes.clear();
        let err = build_design_matrix(&cohort, Stage::Pre, false, None).unwrap_err();
        assert!(matches!(err, Error::UnlabeledPatient { ref patient } if patient == "b"));
    }

    #[test]
    fn drop_sparse_variables_uses_patient_level_missingness() {
        let mut cohort = two_patient_cohort();
        // "bp" is observed for patient a only -> 50% missing; "spo2" for b only.
        let kept = drop_sparse_variables(&cohort, 0.6).unwrap();
        assert_eq!(kept.variable_names.len(), 3);
        let kept = drop_sparse_variables(&cohort, 0.4).unwrap();
        assert_eq!(kept.variable_names, vec!["hr".to_string()]);
        assert_eq!(kept.patients[0].series.len(), 1);

        // an explicitly-recorded missing entry still counts as unobserved,
        // so "bp" is now missing for both patients
        cohort.patients[0].series[1] = vec![(1.0, None)];
        let fr = missing_fractions(&cohort);
        assert_eq!(fr[1], 1.0);

        for p in &mut cohort.patients {
            p.series = vec![vec![], vec![], vec![]];
        }
        assert!(matches!(
            drop_sparse_variables(&cohort, 0.4),
            Err(Error::AllVariablesDropped)
        ));
    }

    #[test]
    fn quantiles_are_generic_over_f32() {
        let v = [1.0f32, 2.0, 3.0, 4.0, 5.0];
        assert!((quantile(&v, 0.05f32) - 1.2).abs() < 1e-6);
    }
}
