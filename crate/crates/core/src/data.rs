//! Core data containers shared by the whole pipeline: flat cohorts with
//! binary labels, and per-patient longitudinal trajectories with stage
//! boundaries and outcome series.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat design matrix with binary labels and optional ground-truth
/// phenotype tags. Missing entries are encoded as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort<S: Scalar> {
    pub features: Array2<S>,
    /// One {0,1} label per row.
    pub labels: Vec<u8>,
    /// Ground-truth phenotype per row, when known (synthetic cohorts).
    pub phenotype: Option<Vec<String>>,
    pub feature_names: Vec<String>,
}

impl<S: Scalar> Cohort<S> {
    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, S> {
        self.features.row(i)
    }

    /// Fraction of rows with label 1.
    pub fn prevalence(&self) -> S {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        S::from_count(pos) / S::from_count(self.labels.len().max(1))
    }

    /// Shape consistency and label range.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n_samples() {
            return Err(Error::LengthMismatch {
                context: "cohort labels vs feature rows".into(),
                expected: self.n_samples(),
                got: self.labels.len(),
            });
        }
        if self.feature_names.len() != self.n_features() {
            return Err(Error::LengthMismatch {
                context: "cohort feature names vs columns".into(),
                expected: self.n_features(),
                got: self.feature_names.len(),
            });
        }
        if let Some(ph) = &self.phenotype {
            if ph.len() != self.n_samples() {
                return Err(Error::LengthMismatch {
                    context: "cohort phenotype tags vs rows".into(),
                    expected: self.n_samples(),
                    got: ph.len(),
                });
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid("labels", format!("label {bad} is not 0/1")));
        }
        Ok(())
    }

    /// Errors if any entry is NaN or infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "cohort feature matrix".into(),
            });
        }
        Ok(())
    }

    /// Replaces NaN entries column-wise by the mean of the observed values
    /// (0 when a column is entirely missing). Returns the number of imputed
    /// cells.
    pub fn mean_impute(&mut self) -> usize {
        let mut imputed = 0;
        for c in 0..self.n_features() {
            let mut sum = S::zero();
            let mut n = 0usize;
            for r in 0..self.n_samples() {
                let v = self.features[[r, c]];
                if v.is_finite() {
                    sum = sum + v;
                    n += 1;
                }
            }
            let fill = if n > 0 { sum / S::from_count(n) } else { S::zero() };
            for r in 0..self.n_samples() {
                if !self.features[[r, c]].is_finite() {
                    self.features[[r, c]] = fill;
                    imputed += 1;
                }
            }
        }
        imputed
    }

    /// Sub-cohort restricted to the given feature columns (kept in the
    /// given order).
    pub fn select_features(&self, indices: &[usize]) -> Result<Cohort<S>> {
        for &i in indices {
            if i >= self.n_features() {
                return Err(Error::invalid(
                    "feature index",
                    format!("{i} out of range for {} features", self.n_features()),
                ));
            }
        }
        let mut features = Array2::zeros((self.n_samples(), indices.len()));
        for (out_c, &c) in indices.iter().enumerate() {
            for r in 0..self.n_samples() {
                features[[r, out_c]] = self.features[[r, c]];
            }
        }
        Ok(Cohort {
            features,
            labels: self.labels.clone(),
            phenotype: self.phenotype.clone(),
            feature_names: indices.iter().map(|&i| self.feature_names[i].clone()).collect(),
        })
    }

    /// Sub-cohort restricted to the given rows (kept in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Cohort<S> {
        let mut features = Array2::zeros((rows.len(), self.n_features()));
        for (out_r, &r) in rows.iter().enumerate() {
            for c in 0..self.n_features() {
                features[[out_r, c]] = self.features[[r, c]];
            }
        }
        Cohort {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            phenotype: self
                .phenotype
                .as_ref()
                .map(|ph| rows.iter().map(|&r| ph[r].clone()).collect()),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Perioperative stage of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Intra,
    Post,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pre, Stage::Intra, Stage::Post];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Intra => "intra",
            Stage::Post => "post",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Ok(Stage::Pre),
            "intra" => Ok(Stage::Intra),
            "post" => Ok(Stage::Post),
            other => Err(Error::invalid("stage", format!("unknown stage `{other}`"))),
        }
    }
}

/// Closed time intervals delimiting the pre/intra/post windows of one
/// trajectory. `None` marks an absent stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBoundaries<S: Scalar> {
    pub pre: Option<(S, S)>,
    pub intra: Option<(S, S)>,
    pub post: Option<(S, S)>,
}

impl<S: Scalar> StageBoundaries<S> {
    pub fn window(&self, stage: Stage) -> Option<(S, S)> {
        match stage {
            Stage::Pre => self.pre,
            Stage::Intra => self.intra,
            Stage::Post => self.post,
        }
    }

    /// End of the last present stage, i.e. the input horizon T.
    pub fn last_end(&self) -> Option<S> {
        self.post
            .or(self.intra)
            .or(self.pre)
            .map(|(_, end)| end)
    }

    /// Start of the earliest present stage that ends exactly where `stage`
    /// begins; used to assign boundary points to the earlier stage.
    pub fn earlier_stage_ends_at(&self, stage: Stage, t: S) -> bool {
        let earlier: &[Option<(S, S)>] = match stage {
            Stage::Pre => &[],
            Stage::Intra => &[self.pre],
            Stage::Post => &[self.pre, self.intra],
        };
        earlier
            .iter()
            .flatten()
            .any(|&(_, end)| end == t)
    }

    /// Interval ordering: each present window must be internally ordered and
    /// start no earlier than the previous present window ends.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end: Option<S> = None;
        for (name, w) in [("pre", self.pre), ("intra", self.intra), ("post", self.post)] {
            if let Some((start, end)) = w {
                if !(start.is_finite() && end.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("{name} stage boundary"),
                    });
                }
                if start > end {
                    return Err(Error::invalid(
                        "stage boundaries",
                        format!("{name} starts after it ends"),
                    ));
                }
                if let Some(pe) = prev_end {
                    if start < pe {
                        return Err(Error::invalid(
                            "stage boundaries",
                            format!("{name} starts before the previous stage ends"),
                        ));
                    }
                }
                prev_end = Some(end);
            }
        }
        Ok(())
    }
}

/// One patient's irregular multivariate series, stage boundaries, and
/// outcome assessments. Series are aligned with the cohort's
/// `variable_names`; a `None` value is an explicitly recorded missing
/// measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTrajectory<S: Scalar> {
    pub patient_id: String,
    /// `series[v]` holds (timestamp, value) pairs for variable `v`,
    /// timestamps non-decreasing.
    pub series: Vec<Vec<(S, Option<S>)>>,
    pub stages: StageBoundaries<S>,
    /// (timestamp, {0,1}) outcome assessments, observed at or after the
    /// input horizon.
    pub outcomes: Vec<(S, u8)>,
}

impl<S: Scalar> PatientTrajectory<S> {
    pub fn outcome_labels(&self) -> Vec<u8> {
        self.outcomes.iter().map(|&(_, y)| y).collect()
    }
}

/// A cohort of trajectories sharing one variable vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCohort<S: Scalar> {
    pub patients: Vec<PatientTrajectory<S>>,
    pub variable_names: Vec<String>,
}

impl<S: Scalar> TrajectoryCohort<S> {
    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_variables(&self) -> usize {
        self.variable_names.len()
    }
}
