//! REML / ML estimation of the variance parameters by Fisher scoring, and
//! GLS estimation of the fixed effects.

use nalgebra::{DMatrix, DVector};

use crate::error::{EblupError, Result};
use crate::likelihood::{CovState, InformationMatrix, Method};
use crate::model::{CovarianceFamily, MixedModel, SigmaVector};

/// Maximum number of step halvings per iteration.
pub const MAX_HALVINGS: usize = 30;

/// Sufficient-increase constant of the step-halving line search.
pub const ARMIJO_C: f64 = 0.25;

/// Relative size of loglikelihood differences treated as rounding noise.
pub const LOGLIK_NOISE: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub start: Option<Vec<f64>>,
    pub max_iter: usize,
    pub tol: f64,
    /// Lower bound used when clamping components that leave the parameter
    /// space. Zero clamps onto the boundary itself.
    pub clamp_eps: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { start: None, max_iter: 100, tol: 1e-8, clamp_eps: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub sigma_hat: SigmaVector,
    pub method: Method,
    pub beta_hat: DVector<f64>,
    /// `(X' Sigma_hat^-1 X)^-1`
    pub beta_cov: DMatrix<f64>,
    pub information: InformationMatrix,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub converged: bool,
    pub boundary_hit: bool,
    pub effective_dims: DVector<f64>,
    pub loglik: f64,
    /// Objective value after every accepted step, starting point first.
    pub loglik_trace: Vec<f64>,
}

/// GLS fixed effects `(X' Sigma^-1 X)^-1 X' Sigma^-1 y` and their covariance.
pub fn gls_beta(model: &MixedModel, sigma: &[f64], y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.check_y(y)?;
    let st = CovState::new(model, sigma)?;
    Ok((st.gls_beta(y), st.gram_inv().clone()))
}

/// Deterministic starting point: the mean squared OLS residual split
/// equally over the components, floored at `1e-4` of the residual variance
/// (or `1e-4` when the residuals vanish).
pub fn starting_values(model: &MixedModel, y: &DVector<f64>, _method: Method) -> Result<Vec<f64>> {
    model.check_y(y)?;
    let x = model.x();
    let xtx = (x.transpose() * x).cholesky().ok_or(EblupError::SingularGram)?;
    let beta = xtx.solve(&(x.transpose() * y));
    let resid = y - x * beta;
    let var = resid.norm_squared() / model.n() as f64;
    let s = model.s();
    let floor = if var > 0.0 { 1e-4 * var } else { 1e-4 };
    let share = (var / s as f64).max(floor);
    let mut start = vec![share; s];
    if let CovarianceFamily::FayHerriot { .. } = model.family() {
        start[0] = start[0].max(0.0);
    }
    Ok(start)
}

struct Eval<'m> {
    state: CovState<'m>,
    loglik: f64,
    score: DVector<f64>,
    info: InformationMatrix,
    dims: DVector<f64>,
}

fn evaluate<'m>(model: &'m MixedModel, sigma: &[f64], y: &DVector<f64>, method: Method) -> Result<Eval<'m>> {
    let state = CovState::new(model, sigma)?;
    let loglik = state.loglik(y, method);
    if !loglik.is_finite() {
        return Err(EblupError::NotPositiveDefinite);
    }
    Ok(Eval {
        loglik,
        score: state.score(y, method),
        info: state.information(method),
        dims: state.effective_dims(),
        state,
    })
}

fn lower_bound(model: &MixedModel, i: usize, clamp_eps: f64) -> f64 {
    if model.family().strictly_positive(i) {
        clamp_eps.max(f64::MIN_POSITIVE)
    } else {
        clamp_eps.max(0.0)
    }
}

/// Scaled score norm `max_i |score_i| / (1 + d_i^2)`, with components that
/// sit on their lower bound and push outward (score <= 0) counted as zero.
fn scaled_score_norm(score: &DVector<f64>, dims: &DVector<f64>, at_lower: &[bool]) -> f64 {
    score
        .iter()
        .zip(dims.iter())
        .zip(at_lower)
        .map(|((&g, &d), &low)| if low && g <= 0.0 { 0.0 } else { g.abs() / (1.0 + d * d) })
        .fold(0.0, f64::max)
}

/// Ascent direction: Fisher scoring when `-A` is positive definite,
/// otherwise Newton on the observed Hessian, otherwise a scaled gradient.
/// Components held at their lower bound (`active`) get a zero step and the
/// system is solved on the remaining block.
fn direction(ev: &Eval<'_>, y: &DVector<f64>, method: Method, sigma: &[f64], active: &[bool]) -> DVector<f64> {
    let free: Vec<usize> = (0..sigma.len()).filter(|&i| !active[i]).collect();
    let block = |m: &DMatrix<f64>| DMatrix::from_fn(free.len(), free.len(), |a, b| m[(free[a], free[b])]);
    let score = DVector::from_fn(free.len(), |a, _| ev.score[free[a]]);
    let tol = crate::likelihood::INFORMATION_REL_TOL;
    let sub = crate::linalg::spd_inverse_checked(&block(&ev.info.fisher()), ev.info.scale, tol)
        .map(|inv| inv * &score)
        .or_else(|| {
            let neg_h = -block(&ev.state.hessian(y, method));
            let scale = neg_h.amax().max(ev.info.scale);
            crate::linalg::spd_inverse_checked(&neg_h, scale, tol).map(|inv| inv * &score)
        })
        .unwrap_or_else(|| {
            DVector::from_fn(free.len(), |a, _| {
                let step = sigma[free[a]].abs().max(1.0);
                score[a] * step * step
            })
        });
    let mut dir = DVector::zeros(sigma.len());
    for (a, &i) in free.iter().enumerate() {
        dir[i] = sub[a];
    }
    dir
}

/// Fisher scoring for the REML (`l_R`) or ML (`l_P`) score equations with
/// step halving and clamping onto the parameter-space boundary.
pub fn fit(model: &MixedModel, y: &DVector<f64>, method: Method, options: &FitOptions) -> Result<FitResult> {
    model.check_y(y)?;
    let s = model.s();
    let mut sigma = match &options.start {
        Some(start) => {
            model.check_sigma_len(start)?;
            start.clone()
        }
        None => starting_values(model, y, method)?,
    };
    let lows: Vec<f64> = (0..s).map(|i| lower_bound(model, i, options.clamp_eps)).collect();
    for (v, &lo) in sigma.iter_mut().zip(&lows) {
        *v = v.max(lo);
    }

    let mut ev = evaluate(model, &sigma, y, method)?;
    let mut trace = vec![ev.loglik];
    let mut iterations = 0;
    let mut converged = false;
    let mut norm;

    loop {
        let at_lower: Vec<bool> = sigma.iter().zip(&lows).map(|(v, lo)| v <= lo).collect();
        norm = scaled_score_norm(&ev.score, &ev.dims, &at_lower);
        if norm <= options.tol {
            converged = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;

        let active: Vec<bool> = (0..s).map(|i| at_lower[i] && ev.score[i] <= 0.0).collect();
        let dir = direction(&ev, y, method, &sigma, &active);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = (0..s).map(|i| (sigma[i] + step * dir[i]).max(lows[i])).collect();
            if cand == sigma {
                break;
            }
            let gain: f64 = (0..s).map(|i| ev.score[i] * (cand[i] - sigma[i])).sum();
            // Below `noise` the loglik difference is rounding error and the
            // score norm decides instead.
            let noise = LOGLIK_NOISE * (1.0 + ev.loglik.abs());
            if let Ok(next) = evaluate(model, &cand, y, method) {
                let sufficient = next.loglik >= ev.loglik + ARMIJO_C * gain;
                let at_floor = gain <= noise && next.loglik >= ev.loglik - noise && {
                    let low: Vec<bool> = cand.iter().zip(&lows).map(|(v, lo)| v <= lo).collect();
                    scaled_score_norm(&next.score, &next.dims, &low) <= (1.0 - ARMIJO_C) * norm
                };
                if sufficient || at_floor {
                    accepted = Some((cand, next));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, next)) => {
                sigma = cand;
                ev = next;
                trace.push(ev.loglik);
            }
            None => {
                // No ascent possible along the direction: numerically stationary.
                converged = norm <= options.tol.sqrt();
                break;
            }
        }
    }

    let sigma_hat = model.validate_sigma(&sigma)?;
    let boundary_hit = sigma.iter().zip(&lows).any(|(v, lo)| v <= lo) || sigma_hat.on_boundary();
    let beta_hat = ev.state.gls_beta(y);
    Ok(FitResult {
        beta_cov: ev.state.gram_inv().clone(),
        beta_hat,
        information: ev.info,
        iterations,
        final_score_norm: norm,
        converged,
        boundary_hit,
        effective_dims: ev.dims,
        loglik: ev.loglik,
        loglik_trace: trace,
        sigma_hat,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_anova, build_fay_herriot};

    fn canonical() -> MixedModel {
        build_fay_herriot(&[1.0, 1.0], DMatrix::from_element(2, 1, 1.0)).unwrap()
    }

    #[test]
    fn gls_examples() {
        let m = build_anova(DMatrix::from_element(2, 1, 1.0), vec![DMatrix::identity(2, 2)]).unwrap();
        let y = DVector::from_vec(vec![1.0, 4.0]);
        // Sigma = I
        let (b, _) = gls_beta(&m, &[0.5, 0.5], &y).unwrap();
        assert!((b[0] - 2.5).abs() < 1e-14);

        let fh = build_fay_herriot(&[1.0, 3.0], DMatrix::from_element(2, 1, 1.0)).unwrap();
        let (b, _) = gls_beta(&fh, &[0.0], &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert!((b[0] - 1.25).abs() < 1e-14);

        let (b, cov) = gls_beta(&canonical(), &[1.0], &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert!(b[0].abs() < 1e-15);
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn starting_value_examples() {
        let y = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(starting_values(&canonical(), &y, Method::Reml).unwrap(), vec![1.0]);

        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let fh = build_fay_herriot(&[1.0, 1.0, 1.0], x).unwrap();
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0]);
        let st = starting_values(&fh, &y, Method::Reml).unwrap();
        assert!(st[0] > 0.0 && st[0] < 1e-3);

        let m = build_anova(DMatrix::from_element(4, 1, 1.0), vec![DMatrix::identity(4, 4)]).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 6.0]);
        let st = starting_values(&m, &y, Method::Reml).unwrap();
        // residual variance = (4 + 1 + 0 + 9) / 4
        assert!((st[0] - 14.0 / 8.0).abs() < 1e-14);
        assert_eq!(st[0], st[1]);
    }

    #[test]
    fn canonical_reml_fit() {
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let f = fit(&canonical(), &y, Method::Reml, &FitOptions::default()).unwrap();
        assert!(f.converged);
        assert!(f.iterations <= 5);
        assert!((f.sigma_hat.values[0] - 1.0).abs() < 1e-8);
        assert!(!f.boundary_hit);
    }

    #[test]
    fn canonical_ml_fit_hits_boundary() {
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let f = fit(&canonical(), &y, Method::Ml, &FitOptions::default()).unwrap();
        assert!(f.converged);
        assert_eq!(f.sigma_hat.values[0], 0.0);
        assert!(f.boundary_hit);
        assert_eq!(f.sigma_hat.boundary_flags, vec![true]);
    }

    #[test]
    fn loglik_trace_is_monotone() {
        let x = DMatrix::from_fn(12, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let phi: Vec<f64> = (0..12).map(|i| 0.5 + 0.1 * i as f64).collect();
        let m = build_fay_herriot(&phi, x).unwrap();
        let y = DVector::from_fn(12, |i, _| (i as f64 * 1.7).cos() * 2.0);
        let f = fit(&m, &y, Method::Reml, &FitOptions { start: Some(vec![10.0]), ..Default::default() }).unwrap();
        for w in f.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - LOGLIK_NOISE * (1.0 + w[0].abs()));
        }
    }
}
