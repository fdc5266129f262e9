//! LI-RADS guided hepatocellular carcinoma classification.
//!
//! The pipeline registers and resamples multi-phase CT cases
//! ([`preprocess`]), measures three handcrafted LI-RADS contrasts plus lesion
//! size ([`radiomics`]), fuses them with deep-model probabilities through an
//! L2-regularised logistic regression ([`model`]) and evaluates the fusion by
//! stratified cross-validation or train→test transfer ([`eval`]).
//! [`phantom`] generates seeded synthetic cases for end-to-end checks.

pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod morphology;
pub mod phantom;
pub mod preprocess;
pub mod radiomics;
pub mod volume;

pub use error::{Error, Result};
