//! Synthetic cohort generation with known latent phenotypes.
//!
//! Feature vectors are drawn i.i.d. standard normal and assigned to a
//! phenotype by threshold predicates over a small set of shared and
//! informative features; every other feature is pure noise. Draws matching
//! zero or several predicates are rejected and resampled, so the stored
//! ground truth is unambiguous.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The cohort generator's random source: ChaCha with 8 rounds, seeded from
/// a single `u64`. Normal draws are `f64` ziggurat samples cast to the
/// target scalar, so a (seed, scalar type) pair pins the exact stream.
pub type CohortRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> CohortRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Threshold predicate over feature positions. Strict and non-strict
/// comparisons are kept distinct so boundary values behave exactly as
/// written in the assignment rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition<S: Scalar> {
    /// value at index strictly greater than threshold
    Gt(usize, S),
    /// value at index strictly less than threshold
    Lt(usize, S),
    /// value at index less than or equal to threshold
    Le(usize, S),
    /// value at index greater than or equal to threshold
    Ge(usize, S),
    All(Vec<Condition<S>>),
    Any(Vec<Condition<S>>),
}

impl<S: Scalar> Condition<S> {
    fn eval_with(&self, fetch: &impl Fn(usize) -> Result<S>) -> Result<bool> {
        match self {
            Condition::Gt(i, t) => Ok(fetch(*i)? > *t),
            Condition::Lt(i, t) => Ok(fetch(*i)? < *t),
            Condition::Le(i, t) => Ok(fetch(*i)? <= *t),
            Condition::Ge(i, t) => Ok(fetch(*i)? >= *t),
            Condition::All(cs) => {
                for c in cs {
                    if !c.eval_with(fetch)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Condition::Any(cs) => {
                for c in cs {
                    if c.eval_with(fetch)? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
        }
    }

    fn collect_indices(&self, out: &mut BTreeSet<usize>) {
        match self {
            Condition::Gt(i, _) | Condition::Lt(i, _) | Condition::Le(i, _) | Condition::Ge(i, _) => {
                out.insert(*i);
            }
            Condition::All(cs) | Condition::Any(cs) => {
                for c in cs {
                    c.collect_indices(out);
                }
            }
        }
    }
}

/// A named phenotype rule together with the outcome label it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypePredicate<S: Scalar> {
    pub name: String,
    /// Label assigned to samples of this phenotype (0 = control, 1 = case).
    pub outcome: u8,
    pub rule: Condition<S>,
}

impl<S: Scalar> PhenotypePredicate<S> {
    pub fn new(name: impl Into<String>, outcome: u8, rule: Condition<S>) -> Self {
        Self {
            name: name.into(),
            outcome,
            rule,
        }
    }

    /// Sorted feature indices the rule reads; evaluation never touches any
    /// other position.
    pub fn required_features(&self) -> Vec<usize> {
        let mut set = BTreeSet::new();
        self.rule.collect_indices(&mut set);
        set.into_iter().collect()
    }

    pub fn matches(&self, x: &[S]) -> Result<bool> {
        let fetch = |i: usize| -> Result<S> {
            x.get(i).copied().ok_or_else(|| Error::PredicateIndexOutOfRange {
                predicate: self.name.clone(),
                index: i,
                len: x.len(),
            })
        };
        self.rule.eval_with(&fetch)
    }
}

/// The four reference phenotype rules, written against 0-based positions of
/// features named `x1..=x30`:
///
/// * alpha (control): `x1 < 0 & x2 < 0 & x3 < 0`
/// * beta:  `(x10 > 0.5 | x11 > 0.5) & x12 > 0.5`
/// * gamma: `x10 <= 0.5 & x13 > 0.5 & x14 <= 0.5`
/// * delta: `x10 <= 0.5 & x15 <= 0.5 & x16 > 0.5`
pub fn default_predicates<S: Scalar>() -> Vec<PhenotypePredicate<S>> {
    let t = S::half();
    let z = S::zero();
    vec![
        PhenotypePredicate::new(
            "alpha",
            0,
            Condition::All(vec![
                Condition::Lt(0, z),
                Condition::Lt(1, z),
                Condition::Lt(2, z),
            ]),
        ),
        PhenotypePredicate::new(
            "beta",
            1,
            Condition::All(vec![
                Condition::Any(vec![Condition::Gt(9, t), Condition::Gt(10, t)]),
                Condition::Gt(11, t),
            ]),
        ),
        PhenotypePredicate::new(
            "gamma",
            1,
            Condition::All(vec![
                Condition::Le(9, t),
                Condition::Gt(12, t),
                Condition::Le(13, t),
            ]),
        ),
        PhenotypePredicate::new(
            "delta",
            1,
            Condition::All(vec![
                Condition::Le(9, t),
                Condition::Le(14, t),
                Condition::Gt(15, t),
            ]),
        ),
    ]
}

/// Configuration for [`generate_cohort`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig<S: Scalar> {
    pub n_samples: usize,
    pub n_features: usize,
    pub seed: u64,
    pub predicates: Vec<PhenotypePredicate<S>>,
    /// Budget of rejected draws before generation gives up.
    pub max_rejections: usize,
}

impl<S: Scalar> Default for SyntheticConfig<S> {
    fn default() -> Self {
        let n_samples = 3000;
        Self {
            n_samples,
            n_features: 30,
            seed: 42,
            predicates: default_predicates(),
            max_rejections: 1000 * n_samples,
        }
    }
}

impl<S: Scalar> SyntheticConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples", "must be positive"));
        }
        if self.predicates.is_empty() {
            return Err(Error::invalid("predicates", "at least one predicate required"));
        }
        let max_index = self
            .predicates
            .iter()
            .flat_map(|p| p.required_features())
            .max()
            .unwrap_or(0);
        if self.n_features <= max_index {
            return Err(Error::invalid(
                "n_features",
                format!(
                    "predicates reference feature index {max_index}, need at least {} features",
                    max_index + 1
                ),
            ));
        }
        Ok(())
    }
}

/// `n_features` i.i.d. standard-normal draws from the given generator.
pub fn sample_feature_vector<S: Scalar, R: Rng>(rng: &mut R, n_features: usize) -> Vec<S> {
    (0..n_features)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::cast(v)
        })
        .collect()
}

/// Index of the assigned predicate, or `None` for a draw to reject.
///
/// Case predicates (outcome 1) take precedence over control predicates
/// (outcome 0): a draw exhibiting a disease phenotype is a case even if it
/// also fits the control profile. Within the deciding tier the match must
/// be unique; zero matches anywhere or several matches in one tier reject
/// the draw, keeping the stored ground truth unambiguous.
pub fn assign_phenotype<S: Scalar>(
    x: &[S],
    predicates: &[PhenotypePredicate<S>],
) -> Result<Option<usize>> {
    let mut case_hit = None;
    let mut case_count = 0usize;
    let mut control_hit = None;
    let mut control_count = 0usize;
    for (i, p) in predicates.iter().enumerate() {
        if p.matches(x)? {
            if p.outcome >= 1 {
                case_count += 1;
                case_hit = Some(i);
            } else {
                control_count += 1;
                control_hit = Some(i);
            }
        }
    }
    Ok(match (case_count, control_count) {
        (1, _) => case_hit,
        (0, 1) => control_hit,
        _ => None,
    })
}

/// Rejection-samples feature vectors until `n_samples` rows each match
/// exactly one predicate. Deterministic given the config (single sequential
/// RNG stream).
pub fn generate_cohort<S: Scalar>(config: &SyntheticConfig<S>) -> Result<Cohort<S>> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let mut features = Array2::zeros((config.n_samples, config.n_features));
    let mut labels = Vec::with_capacity(config.n_samples);
    let mut phenotype = Vec::with_capacity(config.n_samples);

    let mut accepted = 0;
    let mut rejections = 0;
    while accepted < config.n_samples {
        let x = sample_feature_vector::<S, _>(&mut rng, config.n_features);
        match assign_phenotype(&x, &config.predicates)? {
            Some(idx) => {
                for (c, v) in x.into_iter().enumerate() {
                    features[[accepted, c]] = v;
                }
                labels.push(config.predicates[idx].outcome.min(1));
                phenotype.push(config.predicates[idx].name.clone());
                accepted += 1;
            }
            None => {
                rejections += 1;
                if rejections > config.max_rejections {
                    return Err(Error::RejectionBudget {
                        rejections,
                        accepted,
                        requested: config.n_samples,
                    });
                }
            }
        }
    }

    Ok(Cohort {
        features,
        labels,
        phenotype: Some(phenotype),
        feature_names: (1..=config.n_features).map(|i| format!("x{i}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Places the given (1-based position, value) pairs in an otherwise
    /// zero vector, mirroring how the rules are written.
    fn vec30(entries: &[(usize, f64)]) -> Vec<f64> {
        let mut x = vec![0.0; 30];
        for &(pos, v) in entries {
            x[pos - 1] = v;
        }
        x
    }

    fn name_of(x: &[f64]) -> Option<&'static str> {
        let preds = default_predicates::<f64>();
        assign_phenotype(x, &preds)
            .unwrap()
            .map(|i| ["alpha", "beta", "gamma", "delta"][i])
    }

    #[test]
    fn alpha_rule_matches_all_negative_triplet() {
        // x1,x2,x3 negative and every case rule false (x12, x13, x16 at 0).
        let x = vec30(&[(1, -1.0), (2, -1.0), (3, -1.0)]);
        assert_eq!(name_of(&x), Some("alpha"));
    }

    #[test]
    fn beta_rule_matches_example() {
        let x = vec30(&[(1, 1.0), (10, 0.6), (11, 0.0), (12, 0.7)]);
        assert_eq!(name_of(&x), Some("beta"));
    }

    #[test]
    fn zero_vector_matches_nothing() {
        let x = vec30(&[]);
        assert_eq!(name_of(&x), None);
    }

    #[test]
    fn ambiguous_case_draw_is_rejected() {
        // beta and gamma simultaneously true by direct substitution:
        // x11 > 0.5 and x12 > 0.5 satisfy beta while x10 <= 0.5,
        // x13 > 0.5, x14 <= 0.5 satisfy gamma.
        let x = vec30(&[(11, 0.9), (12, 0.9), (13, 0.9)]);
        assert_eq!(name_of(&x), None);
    }

    #[test]
    fn case_predicates_outrank_the_control() {
        // alpha and gamma simultaneously true by direct substitution; the
        // exhibited case phenotype decides.
        let x = vec30(&[(1, -1.0), (2, -1.0), (3, -1.0), (10, 0.4), (13, 0.6), (14, 0.3)]);
        assert_eq!(name_of(&x), Some("gamma"));
    }

    #[test]
    fn boundary_values_fail_strict_comparisons() {
        // x12 exactly at the 0.5 threshold: beta requires strictly greater.
        let x = vec30(&[(1, 1.0), (10, 0.7), (12, 0.5)]);
        assert_eq!(name_of(&x), None);
    }

    #[test]
    fn required_features_are_sorted_and_minimal() {
        let preds = default_predicates::<f64>();
        assert_eq!(preds[0].required_features(), vec![0, 1, 2]);
        assert_eq!(preds[1].required_features(), vec![9, 10, 11]);
        assert_eq!(preds[2].required_features(), vec![9, 12, 13]);
        assert_eq!(preds[3].required_features(), vec![9, 14, 15]);
    }

    #[test]
    fn predicate_index_out_of_range_is_an_error() {
        let preds = default_predicates::<f64>();
        let short = vec![0.0; 5];
        assert!(matches!(
            assign_phenotype(&short, &preds),
            Err(Error::PredicateIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let a: Vec<f64> = sample_feature_vector(&mut seeded_rng(7), 30);
        let b: Vec<f64> = sample_feature_vector(&mut seeded_rng(7), 30);
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
    }

    #[test]
    fn normal_draws_match_moments() {
        let mut rng = seeded_rng(123);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn generated_rows_satisfy_their_stored_predicate() {
        let config = SyntheticConfig::<f64> {
            n_samples: 400,
            ..SyntheticConfig::default()
        };
        let cohort = generate_cohort(&config).unwrap();
        assert_eq!(cohort.n_samples(), 400);
        assert_eq!(cohort.n_features(), 30);
        cohort.ensure_finite().unwrap();
        let preds = config.predicates.clone();
        let tags = cohort.phenotype.as_ref().unwrap();
        for i in 0..cohort.n_samples() {
            let row: Vec<f64> = cohort.row(i).to_vec();
            let idx = assign_phenotype(&row, &preds).unwrap().expect("unambiguous");
            assert_eq!(preds[idx].name, tags[i]);
            assert_eq!(cohort.labels[i], if tags[i] == "alpha" { 0 } else { 1 });
        }
    }

    #[test]
    fn identical_configs_give_bit_identical_cohorts() {
        let config = SyntheticConfig::<f64> {
            n_samples: 200,
            ..SyntheticConfig::default()
        };
        let a = generate_cohort(&config).unwrap();
        let b = generate_cohort(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejection_budget_is_enforced() {
        // impossible predicate: x1 < 0 and x1 > 0
        let config = SyntheticConfig::<f64> {
            n_samples: 1,
            n_features: 2,
            seed: 1,
            predicates: vec![PhenotypePredicate::new(
                "void",
                1,
                Condition::All(vec![Condition::Lt(0, 0.0), Condition::Gt(0, 0.0)]),
            )],
            max_rejections: 50,
        };
        assert!(matches!(
            generate_cohort(&config),
            Err(Error::RejectionBudget { .. })
        ));
    }

    #[test]
    fn config_rejects_too_few_features() {
        let config = SyntheticConfig::<f64> {
            n_features: 10,
            ..SyntheticConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn generation_works_for_f32() {
        let config = SyntheticConfig::<f32> {
            n_samples: 50,
            ..SyntheticConfig::default()
        };
        let cohort = generate_cohort(&config).unwrap();
        assert_eq!(cohort.n_samples(), 50);
    }
}
