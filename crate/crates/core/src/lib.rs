//! Sex-ratio robustness experiments for handcrafted-feature skin cancer
//! classifiers.
//!
//! The pipeline ingests lesion metadata with segmentation masks, extracts
//! ABC / 7-point style colour and shape features, builds patient-grouped
//! test sets with sex-ratio-controlled training samples, trains an
//! L2-regularised logistic regression per sample and evaluates it per sex
//! with accuracy, AUROC, slope t-tests and Mann-Whitney U tests.
//!
//! The numeric modules ([`selection`], [`logreg`], [`metrics`], [`stats`])
//! are generic over the floating point type through [`Scalar`]; the aliases
//! at the crate root fix them to `f64`, which is what the pipeline uses.

pub mod dataset;
pub mod error;
pub mod features;
pub mod harness;
pub mod imaging;
pub mod logreg;
pub mod metrics;
pub mod scalar;
pub mod selection;
pub mod splits;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used throughout the pipeline.
pub type Real = f64;

pub type LrModel = logreg::LrModel<Real>;
pub type TrainReport = logreg::TrainReport<Real>;
pub type FitOptions = logreg::FitOptions<Real>;
pub type FeatureMatrix = selection::FeatureMatrix<Real>;
pub type SelectionResult = selection::SelectionResult<Real>;
pub type Standardizer = selection::Standardizer<Real>;
pub type SlopeTest = stats::SlopeTest<Real>;
pub type MannWhitney = stats::MannWhitney<Real>;
