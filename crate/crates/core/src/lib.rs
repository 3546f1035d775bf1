//! Phenotype discovery by clustering patients in explanation space.
//!
//! The library covers the full workflow: synthetic cohorts with known
//! latent subgroups, gradient-boosted risk models with cross-validated
//! evaluation, per-patient SHAP attributions in margin space, Ward
//! clustering of the explanation matrix with correct-rate scoring against
//! ground truth, 2-D embeddings for inspection, and the preprocessing and
//! temporal abstraction needed to run the same pipeline on longitudinal
//! cohorts ingested from CSV.
//!
//! The numeric core is generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the aliases at the crate root fix `f64`, which the
//! pipeline and CLI use throughout.

pub mod cluster;
pub mod data;
pub mod embed;
pub mod error;
pub mod io;
pub mod models;
pub mod pipeline;
pub mod scalar;
pub mod shap;
pub mod svg;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Cohort64 = data::Cohort<f64>;
pub type TrajectoryCohort64 = data::TrajectoryCohort<f64>;
pub type DistributionSummary64 = temporal::DistributionSummary<f64>;
pub type GbmModel64 = models::GbmModel<f64>;
pub type LinearModel64 = models::LinearModel<f64>;
pub type EvalReport64 = models::EvalReport<f64>;
pub type ShapVector64 = shap::ShapVector<f64>;
pub type ShapMatrix64 = shap::ShapMatrix<f64>;
pub type Dendrogram64 = cluster::Dendrogram<f64>;
pub type CorrectRateReport64 = cluster::CorrectRateReport<f64>;
pub type Embedding2D64 = embed::Embedding2D<f64>;
