//! Empirical best linear unbiased prediction in linear mixed models.
//!
//! REML/ML estimation of variance components, BLUP/EBLUP of mixed effects,
//! second-order MSE estimators, Kronecker algebra for balanced ANOVA
//! designs and a Monte Carlo study harness.

pub mod checks;
pub mod error;
pub mod estimation;
pub mod kron;
pub mod likelihood;
mod linalg;
pub mod model;
pub mod mse;
pub mod prediction;
pub mod simulation;

pub use error::{EblupError, Result};
pub use estimation::{fit, gls_beta, starting_values, FitOptions, FitResult};
pub use kron::{BalancedDesign, KronCoefficients};
pub use likelihood::{CovState, InformationMatrix, Method, Tensor3};
pub use model::{
    build_anova, build_fay_herriot, build_nested_error, CovarianceFamily, FamilyKind, Labels, MixedModel,
    PredictionTarget, SigmaVector,
};
pub use mse::{mse_estimators, DeltaTerms, MseReport};
pub use prediction::{blup, eblup, BlupResult, Warning};
pub use simulation::{run_study, McConfig, McReport};

pub use nalgebra::{DMatrix, DVector};
