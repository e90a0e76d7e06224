use eblup::{FamilyKind, FitResult, Method, MseReport, SigmaVector, Warning};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub command: String,
    pub input: InputEcho,
    pub fit: FitSummary,
    pub predictions: Vec<Prediction>,
    pub mse: Vec<TargetMse>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputEcho {
    pub family: FamilyKind,
    pub data: String,
    pub design: Option<String>,
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub r: usize,
    pub s: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub data_specific: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub sigma_hat: SigmaVector,
    pub beta_hat: Vec<f64>,
    pub beta_cov: Vec<Vec<f64>>,
    /// Expected Hessian `A` at the estimate; `-A` is the Fisher information.
    pub expected_hessian: Vec<Vec<f64>>,
    pub information_singular: bool,
    pub effective_dims: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub boundary_hit: bool,
    pub loglik: f64,
    pub final_score_norm: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        FitSummary {
            sigma_hat: f.sigma_hat.clone(),
            beta_hat: f.beta_hat.iter().copied().collect(),
            beta_cov: rows(&f.beta_cov),
            expected_hessian: rows(&f.information.a),
            information_singular: f.information.is_singular(),
            effective_dims: f.effective_dims.iter().copied().collect(),
            iterations: f.iterations,
            converged: f.converged,
            boundary_hit: f.boundary_hit,
            loglik: f.loglik,
            final_score_norm: f.final_score_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub target: String,
    pub eblup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetMse {
    pub target: String,
    pub eblup: f64,
    pub report: MseReport,
}
