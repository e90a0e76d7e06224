//! BLUP / EBLUP of mixed effects `mu = l' beta + m' v`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimation::FitResult;
use crate::likelihood::CovState;
use crate::model::{MixedModel, PredictionTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warning {
    /// The variance estimate sits on the parameter-space boundary.
    BoundaryEstimate,
    /// `-A` is singular at the estimate; only the naive MSE is available.
    SingularInformation,
    /// The estimator stopped before meeting its convergence criterion.
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlupResult {
    pub value: f64,
    pub s_weights: DVector<f64>,
    pub beta_used: DVector<f64>,
    pub v_tilde: DVector<f64>,
    pub warnings: Vec<Warning>,
}

impl<'m> CovState<'m> {
    /// `s(sigma) = Sigma^-1 Z G m`
    pub fn blup_weights(&self, target: &PredictionTarget) -> DVector<f64> {
        let model = self.model();
        let gm = model.g_diag(self.sigma()).component_mul(&target.m);
        self.solve(&(model.z() * gm))
    }

    /// Columns `d s / d sigma_i = -Sigma^-1 V_i s + Sigma^-1 Z (dG/d sigma_i) m`.
    pub fn grad_s(&self, target: &PredictionTarget) -> DMatrix<f64> {
        let model = self.model();
        let s_vec = self.blup_weights(target);
        let mut out = DMatrix::zeros(model.n(), model.s());
        for i in 0..model.s() {
            let dgm = model.dg_diag(i).component_mul(&target.m);
            let rhs = model.z() * dgm - model.deriv(i).mul_vec(&s_vec);
            out.set_column(i, &self.solve(&rhs));
        }
        out
    }

    pub fn blup(&self, y: &DVector<f64>, target: &PredictionTarget) -> BlupResult {
        let model = self.model();
        let beta = self.gls_beta(y);
        let resid = y - model.x() * &beta;
        let s_weights = self.blup_weights(target);
        let value = target.l.dot(&beta) + s_weights.dot(&resid);
        let v_tilde = model.g_diag(self.sigma()).component_mul(&(model.z().transpose() * self.solve(&resid)));
        BlupResult { value, s_weights, beta_used: beta, v_tilde, warnings: Vec::new() }
    }
}

pub fn blup_weights(model: &MixedModel, sigma: &[f64], target: &PredictionTarget) -> Result<DVector<f64>> {
    Ok(CovState::new(model, sigma)?.blup_weights(target))
}

pub fn grad_s(model: &MixedModel, sigma: &[f64], target: &PredictionTarget) -> Result<DMatrix<f64>> {
    Ok(CovState::new(model, sigma)?.grad_s(target))
}

pub fn blup(model: &MixedModel, sigma: &[f64], y: &DVector<f64>, target: &PredictionTarget) -> Result<BlupResult> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.blup(y, target))
}

pub(crate) fn fit_warnings(fit: &FitResult) -> Vec<Warning> {
    let mut w = Vec::new();
    if fit.boundary_hit {
        w.push(Warning::BoundaryEstimate);
    }
    if !fit.converged {
        w.push(Warning::NotConverged);
    }
    w
}

/// BLUP evaluated at the fitted `sigma_hat`. Boundary estimates are kept
/// and flagged.
pub fn eblup(model: &MixedModel, fit: &FitResult, y: &DVector<f64>, target: &PredictionTarget) -> Result<BlupResult> {
    let mut res = blup(model, fit.sigma_hat.as_slice(), y, target)?;
    res.warnings = fit_warnings(fit);
    Ok(res)
}
