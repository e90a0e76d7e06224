//! MSE components of the (E)BLUP and the MSE estimators built from them.
//!
//! * `g1 = m'(G - G Z' Sigma^-1 Z G) m`
//! * `g2 = (l - X's)' (X' Sigma^-1 X)^-1 (l - X's)`
//! * `g3 = tr{ [grad s]' Sigma [grad s] (-A)^-1 }`
//! * `g3_data = r' [grad s] (-A)^-1 [grad s]' r`, `r = y - X beta_tilde`
//! * `g10 = (d g1 / d sigma)' A_M^-1 g_M0`
//!
//! `A` is the expected Hessian of the loglikelihood, which is negative
//! definite; `-A` is the Fisher information and `(-A)^-1` the asymptotic
//! covariance of the estimate, so `g3 >= 0`.
//!
//! Estimators: naive `g1 + g2`, `prasad_rao = g1 + g2 + 2 g3`, and the
//! second-order correct estimator, which equals `prasad_rao` for REML and
//! subtracts `g10` for ML.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimation::FitResult;
use crate::likelihood::{CovState, InformationMatrix, Method};
use crate::model::{MixedModel, PredictionTarget};
use crate::prediction::{fit_warnings, Warning};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseReport {
    pub method: Method,
    pub g1: f64,
    pub g2: f64,
    pub g3: Option<f64>,
    pub g3_data: Option<f64>,
    pub g10: Option<f64>,
    pub naive: f64,
    pub prasad_rao: Option<f64>,
    pub second_order: Option<f64>,
    /// Second-order estimator with `g3` replaced by `g3_data`.
    pub second_order_data: Option<f64>,
    pub warnings: Vec<Warning>,
}

/// Leading-order bias terms of `eta(sigma_hat)` and the vectors they are
/// built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTerms {
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// `w_R` (REML) or `w_M` (ML).
    pub w_vec: DVector<f64>,
    /// `d g1 / d sigma`
    pub b_vec: DVector<f64>,
}

impl DeltaTerms {
    pub fn sum(&self) -> f64 {
        self.delta0 + self.delta1 + self.delta2 + self.delta3
    }
}

impl<'m> CovState<'m> {
    pub fn g1(&self, target: &PredictionTarget) -> f64 {
        let model = self.model();
        let gm = model.g_diag(self.sigma()).component_mul(&target.m);
        let zgm = model.z() * &gm;
        target.m.dot(&gm) - zgm.dot(&self.solve(&zgm))
    }

    /// `d g1 / d sigma_i = m' dG_i m - 2 (Z dG_i m)' s + s' V_i s`.
    pub fn g1_gradient(&self, target: &PredictionTarget) -> DVector<f64> {
        let model = self.model();
        let s_vec = self.blup_weights(target);
        DVector::from_fn(model.s(), |i, _| {
            let dgm = model.dg_diag(i).component_mul(&target.m);
            target.m.dot(&dgm) - 2.0 * (model.z() * dgm).dot(&s_vec) + model.deriv(i).bilinear(&s_vec, &s_vec)
        })
    }

    pub fn g2(&self, target: &PredictionTarget) -> f64 {
        let s_vec = self.blup_weights(target);
        let d = &target.l - self.model().x().transpose() * s_vec;
        d.dot(&(self.gram_inv() * &d))
    }

    /// `[grad s]' Sigma [grad s]`
    fn grad_s_gram(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        let sigma_mat = self.model().sigma_matrix(self.sigma());
        let mut m = grad.transpose() * sigma_mat * grad;
        crate::linalg::symmetrize(&mut m);
        m
    }

    pub fn g3_with(&self, target: &PredictionTarget, info: &InformationMatrix) -> Result<f64> {
        let inv = info.fisher_inverse()?;
        let grad = self.grad_s(target);
        Ok(crate::linalg::trace_of_product(&self.grad_s_gram(&grad), &inv))
    }

    pub fn g3_data_with(&self, y: &DVector<f64>, target: &PredictionTarget, info: &InformationMatrix) -> Result<f64> {
        let inv = info.fisher_inverse()?;
        let resid = y - self.model().x() * self.gls_beta(y);
        let h = self.grad_s(target).transpose() * resid;
        Ok(h.dot(&(inv * &h)))
    }

    /// `g10 = b' A_M^-1 g_M0` with `b = d g1 / d sigma`.
    pub fn g10_with(&self, target: &PredictionTarget, info_ml: &InformationMatrix) -> Result<f64> {
        let a_inv = info_ml.a_inverse()?;
        let b = self.g1_gradient(target);
        Ok(b.dot(&(a_inv * self.ml_score_bias())))
    }
}

pub fn g1(model: &MixedModel, sigma: &[f64], target: &PredictionTarget) -> Result<f64> {
    Ok(CovState::new(model, sigma)?.g1(target))
}

pub fn g1_gradient(model: &MixedModel, sigma: &[f64], target: &PredictionTarget) -> Result<DVector<f64>> {
    Ok(CovState::new(model, sigma)?.g1_gradient(target))
}

pub fn g2(model: &MixedModel, sigma: &[f64], target: &PredictionTarget) -> Result<f64> {
    Ok(CovState::new(model, sigma)?.g2(target))
}

pub fn g3(model: &MixedModel, sigma: &[f64], target: &PredictionTarget, method: Method) -> Result<f64> {
    let st = CovState::new(model, sigma)?;
    st.g3_with(target, &st.information(method))
}

pub fn g3_data(
    model: &MixedModel,
    sigma: &[f64],
    y: &DVector<f64>,
    target: &PredictionTarget,
    method: Method,
) -> Result<f64> {
    model.check_y(y)?;
    let st = CovState::new(model, sigma)?;
    st.g3_data_with(y, target, &st.information(method))
}

pub fn g10(model: &MixedModel, sigma: &[f64], target: &PredictionTarget) -> Result<f64> {
    let st = CovState::new(model, sigma)?;
    st.g10_with(target, &st.information(Method::Ml))
}

/// Second-order approximation `g1 + g2 + g3` of the EBLUP MSE at the true
/// `sigma`.
pub fn mse_true_approx(model: &MixedModel, sigma: &[f64], target: &PredictionTarget, method: Method) -> Result<f64> {
    let st = CovState::new(model, sigma)?;
    let g3 = st.g3_with(target, &st.information(method))?;
    Ok(st.g1(target) + st.g2(target) + g3)
}

/// All MSE estimators at the fitted `sigma_hat`. A singular information
/// matrix yields a naive-only report carrying a warning.
pub fn mse_estimators(
    model: &MixedModel,
    fit: &FitResult,
    y: &DVector<f64>,
    target: &PredictionTarget,
    data_specific: bool,
) -> Result<MseReport> {
    model.check_y(y)?;
    let st = CovState::new(model, fit.sigma_hat.as_slice())?;
    report_at(&st, &fit.information, fit_warnings(fit), y, target, data_specific)
}

pub(crate) fn report_at(
    st: &CovState<'_>,
    info: &InformationMatrix,
    mut warnings: Vec<Warning>,
    y: &DVector<f64>,
    target: &PredictionTarget,
    data_specific: bool,
) -> Result<MseReport> {
    let method = info.method;
    let g1 = st.g1(target);
    let g2 = st.g2(target);
    let naive = g1 + g2;
    let mut report = MseReport {
        method,
        g1,
        g2,
        g3: None,
        g3_data: None,
        g10: None,
        naive,
        prasad_rao: None,
        second_order: None,
        second_order_data: None,
        warnings: Vec::new(),
    };
    let g3 = match st.g3_with(target, info) {
        Ok(v) => v,
        Err(_) => {
            warnings.push(Warning::SingularInformation);
            report.warnings = warnings;
            return Ok(report);
        }
    };
    let g10 = match method {
        Method::Reml => None,
        Method::Ml => Some(st.g10_with(target, info)?),
    };
    let correction = g10.unwrap_or(0.0);
    report.g3 = Some(g3);
    report.g10 = g10;
    report.prasad_rao = Some(naive + 2.0 * g3);
    report.second_order = Some(naive + 2.0 * g3 - correction);
    if data_specific {
        let g3d = st.g3_data_with(y, target, info)?;
        report.g3_data = Some(g3d);
        report.second_order_data = Some(naive + 2.0 * g3d - correction);
    }
    report.warnings = warnings;
    Ok(report)
}

/// Leading-order closed forms of the bias terms of `eta(sigma_hat)`:
///
/// * REML: `(0, b'A^-1 w_R, -g3, -b'A^-1 w_R)`
/// * ML: `(2 b'A^-1 g_M0, b'A^-1 w_M - b'A^-1 g_M0, -g3, -b'A^-1 w_M)`
///
/// with `w_i = -tr{A^-1 [tr(W V_i W V_j W V_k)]_{jk}}`, `W = P` (REML) or
/// `Sigma^-1` (ML), and `b = d g1 / d sigma`.
pub fn delta_terms(model: &MixedModel, sigma: &[f64], target: &PredictionTarget, method: Method) -> Result<DeltaTerms> {
    let st = CovState::new(model, sigma)?;
    let info = st.information(method);
    let a_inv = info.a_inverse()?;
    let g3 = st.g3_with(target, &info)?;
    let b = st.g1_gradient(target);
    let w = DVector::from_fn(model.s(), |i, _| {
        -crate::linalg::trace_of_product(&a_inv, &st.trace_triple_slice(i, method))
    });
    let b_ainv = a_inv.transpose() * &b;
    let bw = b_ainv.dot(&w);
    let (delta0, delta1) = match method {
        Method::Reml => (0.0, bw),
        Method::Ml => {
            let bg = b_ainv.dot(&st.ml_score_bias());
            (2.0 * bg, bw - bg)
        }
    };
    Ok(DeltaTerms { delta0, delta1, delta2: -g3, delta3: -bw, w_vec: w, b_vec: b })
}
