//! Restricted and profile loglikelihoods of the variance parameters and
//! their derivatives.
//!
//! All quadratic forms are evaluated with `y` in place of `u = y - X beta`,
//! which is exact because `P X = 0`. The restricted loglikelihood is written
//! without an error-contrast matrix:
//!
//! ```text
//! l_R(sigma) = -1/2 [ log|Sigma| + log|X' Sigma^-1 X| + y' P y ]
//! l_P(sigma) = -1/2 [ log|Sigma| + y' P y ]
//! P = Sigma^-1 - Sigma^-1 X (X' Sigma^-1 X)^-1 X' Sigma^-1
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{EblupError, Result};
use crate::linalg::{self, trace_of_product, SpdFactor};
use crate::model::MixedModel;

/// Smallest eigenvalue of the Fisher information allowed, relative to the
/// magnitude of its trace terms.
pub const INFORMATION_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reml,
    Ml,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Reml => "reml",
            Method::Ml => "ml",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "reml" => Ok(Method::Reml),
            "ml" => Ok(Method::Ml),
            _ => Err(format!("unknown method `{s}`; allowed: reml, ml")),
        }
    }
}

/// Symmetric `s x s x s` array of third derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    s: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(s: usize) -> Self {
        Self { s, data: vec![0.0; s * s * s] }
    }

    pub fn dim(&self) -> usize {
        self.s
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.s + j) * self.s + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.s + j) * self.s + k] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub third: Option<Tensor3>,
}

/// Expected Hessian `A = E[d^2 l / d sigma^2]` of the loglikelihood used by
/// `method`. `-A` is the Fisher information.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationMatrix {
    pub a: DMatrix<f64>,
    pub method: Method,
    /// Magnitude of the trace terms entering `A`; used for the
    /// singularity threshold.
    pub scale: f64,
}

impl InformationMatrix {
    pub fn fisher(&self) -> DMatrix<f64> {
        -&self.a
    }

    /// `(-A)^-1`, or `SingularInformation` when `-A` is not safely
    /// positive definite.
    pub fn fisher_inverse(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse_checked(&self.fisher(), self.scale, INFORMATION_REL_TOL)
            .ok_or(EblupError::SingularInformation)
    }

    /// `A^-1`.
    pub fn a_inverse(&self) -> Result<DMatrix<f64>> {
        Ok(-self.fisher_inverse()?)
    }

    pub fn is_singular(&self) -> bool {
        self.fisher_inverse().is_err()
    }
}

/// Everything that depends on `sigma` alone: the factorization of `Sigma`,
/// `Sigma^-1`, the GLS Gram matrix, `P`, and the products `P V_i`,
/// `Sigma^-1 V_i`.
#[derive(Debug, Clone)]
pub struct CovState<'m> {
    model: &'m MixedModel,
    sigma: Vec<f64>,
    factor: SpdFactor,
    sigma_inv: DMatrix<f64>,
    gram_factor: Cholesky<f64, Dyn>,
    gram_inv: DMatrix<f64>,
    sinv_x: DMatrix<f64>,
    p: DMatrix<f64>,
    pv: Vec<DMatrix<f64>>,
    siv: Vec<DMatrix<f64>>,
    log_det_sigma: f64,
    log_det_gram: f64,
}

impl<'m> CovState<'m> {
    pub fn new(model: &'m MixedModel, sigma: &[f64]) -> Result<Self> {
        model.check_sigma_len(sigma)?;
        let sigma_mat = model.sigma_matrix(sigma);
        let factor = SpdFactor::new(&sigma_mat)?;
        let sigma_inv = factor.inverse();
        let sinv_x = factor.solve_mat(model.x());
        let mut gram = model.x().transpose() * &sinv_x;
        linalg::symmetrize(&mut gram);
        let gram_factor = Cholesky::new(gram).ok_or(EblupError::SingularGram)?;
        let log_det_gram = {
            let l = gram_factor.l_dirty();
            2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
        };
        if !log_det_gram.is_finite() {
            return Err(EblupError::SingularGram);
        }
        let mut gram_inv = gram_factor.inverse();
        linalg::symmetrize(&mut gram_inv);
        let mut p = &sigma_inv - &sinv_x * &gram_inv * sinv_x.transpose();
        linalg::symmetrize(&mut p);
        let s = model.s();
        let pv = (0..s).map(|i| model.deriv(i).right_mul(&p)).collect();
        let siv = (0..s).map(|i| model.deriv(i).right_mul(&sigma_inv)).collect();
        Ok(Self {
            model,
            sigma: sigma.to_vec(),
            log_det_sigma: factor.log_det(),
            factor,
            sigma_inv,
            gram_factor,
            gram_inv,
            sinv_x,
            p,
            pv,
            siv,
            log_det_gram,
        })
    }

    pub fn model(&self) -> &'m MixedModel {
        self.model
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// `(X' Sigma^-1 X)^-1`
    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    pub fn log_det_sigma(&self) -> f64 {
        self.log_det_sigma
    }

    pub fn log_det_gram(&self) -> f64 {
        self.log_det_gram
    }

    /// `Sigma^-1 b` by solving.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(b)
    }

    /// GLS estimate `(X' Sigma^-1 X)^-1 X' Sigma^-1 y`.
    pub fn gls_beta(&self, y: &DVector<f64>) -> DVector<f64> {
        self.gram_factor.solve(&(self.sinv_x.transpose() * y))
    }

    /// `P y`, computed by solves against the factorizations.
    pub fn p_apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let beta = self.gls_beta(y);
        self.solve(&(y - self.model.x() * beta))
    }

    fn s(&self) -> usize {
        self.model.s()
    }

    fn trace_weights(&self, method: Method) -> &[DMatrix<f64>] {
        match method {
            Method::Reml => &self.pv,
            Method::Ml => &self.siv,
        }
    }

    pub fn restricted_loglik(&self, y: &DVector<f64>) -> f64 {
        let py = self.p_apply(y);
        -0.5 * (self.log_det_sigma + self.log_det_gram + y.dot(&py))
    }

    pub fn profile_loglik(&self, y: &DVector<f64>) -> f64 {
        let py = self.p_apply(y);
        -0.5 * (self.log_det_sigma + y.dot(&py))
    }

    pub fn loglik(&self, y: &DVector<f64>, method: Method) -> f64 {
        match method {
            Method::Reml => self.restricted_loglik(y),
            Method::Ml => self.profile_loglik(y),
        }
    }

    /// `(1/2)[y' P V_i P y - tr(W V_i)]` with `W = P` (REML) or
    /// `Sigma^-1` (ML).
    pub fn score(&self, y: &DVector<f64>, method: Method) -> DVector<f64> {
        let py = self.p_apply(y);
        let w = self.trace_weights(method);
        DVector::from_fn(self.s(), |i, _| {
            0.5 * (self.model.deriv(i).bilinear(&py, &py) - w[i].trace())
        })
    }

    /// Observed Hessian; `(1/2) tr(W V_i W V_j) - y' P V_i P V_j P y`.
    pub fn hessian(&self, y: &DVector<f64>, method: Method) -> DMatrix<f64> {
        let s = self.s();
        let py = self.p_apply(y);
        let vpy: Vec<DVector<f64>> = (0..s).map(|i| self.model.deriv(i).mul_vec(&py)).collect();
        let pvpy: Vec<DVector<f64>> = vpy.iter().map(|v| &self.p * v).collect();
        let w = self.trace_weights(method);
        let mut h = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in i..s {
                let quad = 0.5 * (vpy[i].dot(&pvpy[j]) + vpy[j].dot(&pvpy[i]));
                let tr = 0.5 * (trace_of_product(&w[i], &w[j]) + trace_of_product(&w[j], &w[i]));
                let v = 0.5 * tr - quad;
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        h
    }

    /// Third derivatives
    /// `y'PV_iPV_jPV_kPy + y'PV_jPV_kPV_iPy + y'PV_kPV_iPV_jPy
    ///  - (1/2)[tr(WV_iWV_jWV_k) + tr(WV_iWV_kWV_j)]`.
    pub fn third_derivatives(&self, y: &DVector<f64>, method: Method) -> Tensor3 {
        let s = self.s();
        let py = self.p_apply(y);
        // a_i = P V_i P y
        let a: Vec<DVector<f64>> = (0..s).map(|i| &self.p * self.model.deriv(i).mul_vec(&py)).collect();
        // y' P V_i P V_j P V_k P y = a_i' V_j a_k
        let quad = |i: usize, j: usize, k: usize| self.model.deriv(j).bilinear(&a[i], &a[k]);
        let w = self.trace_weights(method);
        let mut t = Tensor3::zeros(s);
        for i in 0..s {
            for j in i..s {
                let wij = &w[i] * &w[j];
                let wji = &w[j] * &w[i];
                for k in j..s {
                    let q = quad(i, j, k) + quad(j, k, i) + quad(k, i, j);
                    let tr = trace_of_product(&wij, &w[k]) + trace_of_product(&wji, &w[k]);
                    let v = q - 0.5 * tr;
                    for (a_, b_, c_) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                        t.set(a_, b_, c_, v);
                    }
                }
            }
        }
        t
    }

    /// `[tr(P V_i P V_j)]_{ij}`
    pub fn trace_pvpv(&self) -> DMatrix<f64> {
        self.trace_matrix(&self.pv)
    }

    /// `[tr(Sigma^-1 V_i Sigma^-1 V_j)]_{ij}`
    pub fn trace_sivsiv(&self) -> DMatrix<f64> {
        self.trace_matrix(&self.siv)
    }

    fn trace_matrix(&self, w: &[DMatrix<f64>]) -> DMatrix<f64> {
        let s = self.s();
        let mut m = DMatrix::zeros(s, s);
        for i in 0..s {
            for j in i..s {
                let v = trace_of_product(&w[i], &w[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// `[tr(W V_i W V_j W V_k)]_{jk}` for fixed `i`.
    pub(crate) fn trace_triple_slice(&self, i: usize, method: Method) -> DMatrix<f64> {
        let s = self.s();
        let w = self.trace_weights(method);
        let mut m = DMatrix::zeros(s, s);
        for j in 0..s {
            let wij = &w[i] * &w[j];
            for k in 0..s {
                m[(j, k)] = trace_of_product(&wij, &w[k]);
            }
        }
        m
    }

    /// Expected Hessian of the loglikelihood for `method`.
    ///
    /// REML: `-(1/2) tr(P V_i P V_j)`.
    /// ML: `(1/2) tr(Sigma^-1 V_i Sigma^-1 V_j) - tr(P V_i P V_j)`, the exact
    /// expectation of the observed profile Hessian since
    /// `E[y'PV_iPV_jPy] = tr(PV_iPV_jP Sigma) = tr(PV_iPV_j)`.
    pub fn information(&self, method: Method) -> InformationMatrix {
        let tp = self.trace_pvpv();
        match method {
            Method::Reml => {
                let a = tp * -0.5;
                let scale = a.amax();
                InformationMatrix { a, method, scale }
            }
            Method::Ml => {
                let ts = self.trace_sivsiv() * 0.5;
                let scale = ts.amax().max(tp.amax());
                InformationMatrix { a: ts - tp, method, scale }
            }
        }
    }

    /// `g_M0,i = (1/2) tr[(Sigma^-1 - P) V_i]`; `E[score_ml] = -g_M0`.
    pub fn ml_score_bias(&self) -> DVector<f64> {
        DVector::from_fn(self.s(), |i, _| 0.5 * (self.siv[i].trace() - self.pv[i].trace()))
    }

    /// `d_i = ||Z_i' P Z_i||_F = sqrt(tr(P V_i P V_i))`.
    pub fn effective_dims(&self) -> DVector<f64> {
        DVector::from_fn(self.s(), |i, _| trace_of_product(&self.pv[i], &self.pv[i]).max(0.0).sqrt())
    }
}

pub fn projection_p(model: &MixedModel, sigma: &[f64]) -> Result<DMatrix<f64>> {
    Ok(CovState::new(model, sigma)?.p)
}

pub fn restricted_loglik(model: &MixedModel, sigma: &[f64], y: &DVector<f64>) -> Result<f64> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.restricted_loglik(y))
}

pub fn profile_loglik(model: &MixedModel, sigma: &[f64], y: &DVector<f64>) -> Result<f64> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.profile_loglik(y))
}

pub fn score_reml(model: &MixedModel, sigma: &[f64], y: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.score(y, Method::Reml))
}

pub fn score_ml(model: &MixedModel, sigma: &[f64], y: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.score(y, Method::Ml))
}

pub fn hessian(model: &MixedModel, sigma: &[f64], y: &DVector<f64>, method: Method) -> Result<DMatrix<f64>> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.hessian(y, method))
}

pub fn third_derivatives(model: &MixedModel, sigma: &[f64], y: &DVector<f64>, method: Method) -> Result<Tensor3> {
    model.check_y(y)?;
    Ok(CovState::new(model, sigma)?.third_derivatives(y, method))
}

pub fn derivatives(
    model: &MixedModel,
    sigma: &[f64],
    y: &DVector<f64>,
    method: Method,
    with_third: bool,
) -> Result<DerivativeBundle> {
    model.check_y(y)?;
    let st = CovState::new(model, sigma)?;
    Ok(DerivativeBundle {
        score: st.score(y, method),
        hessian: st.hessian(y, method),
        third: with_third.then(|| st.third_derivatives(y, method)),
    })
}

/// Expected information; fails with `SingularInformation` when `-A` is not
/// invertible.
pub fn expected_information(model: &MixedModel, sigma: &[f64], method: Method) -> Result<InformationMatrix> {
    let info = CovState::new(model, sigma)?.information(method);
    info.fisher_inverse()?;
    Ok(info)
}

pub fn ml_score_bias(model: &MixedModel, sigma: &[f64]) -> Result<DVector<f64>> {
    Ok(CovState::new(model, sigma)?.ml_score_bias())
}

pub fn effective_dims(model: &MixedModel, sigma: &[f64]) -> Result<DVector<f64>> {
    Ok(CovState::new(model, sigma)?.effective_dims())
}
