//! Balanced ANOVA designs with Kronecker structure.
//!
//! A design has `w` crossed factors plus a final "repetition within cells"
//! factor, with level counts `n_1..n_{w+1}`. Index tuples in `{0,1}^{w+1}`
//! are stored as bitmasks: bit `l` is the coordinate of factor `l + 1`, so
//! the within-cell factor is bit `w`. For a tuple `i`,
//!
//! * `Z_i = (x)_l 1_{n_l}^{i_l}` with `1^0 = I`, `1^1 = 1`,
//! * `Z_i Z_i' = (x)_l J_{n_l}^{i_l}` with `J^0 = I`, `J^1 = J`,
//! * `r_i = prod_{i_l = 0} n_l` is the number of columns of `Z_i`.
//!
//! Observations are ordered with the first factor varying slowest, which is
//! the row order of the Kronecker products above.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EblupError, Result};
use crate::likelihood::CovState;
use crate::model::{build_anova, MixedModel};

/// Largest supported number of factors including the within-cell factor.
pub const MAX_FACTORS: usize = 16;

/// Tolerance for [`projection_identity_check`].
pub const PROJECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancedDesign {
    /// `n_1..n_{w+1}`; the last entry is the number of repetitions per cell.
    pub levels: Vec<usize>,
    /// Random-effect tuples `S`, in the order of `sigma_1..sigma_q`.
    pub random: Vec<u32>,
    /// Fixed-effect tuple `s`.
    pub fixed: u32,
}

impl BalancedDesign {
    pub fn new(levels: Vec<usize>, random: Vec<u32>, fixed: u32) -> Result<Self> {
        let d = Self { levels, random, fixed };
        d.validate()?;
        Ok(d)
    }

    /// One-way layout: `t` groups of `k` observations, `S = {(0,1)}`,
    /// intercept only.
    pub fn one_way(t: usize, k: usize) -> Result<Self> {
        Self::new(vec![t, k], vec![0b10], 0b11)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.levels.len();
        if !(1..=MAX_FACTORS).contains(&f) {
            return Err(EblupError::InvalidDesign(format!("factor count {f} outside 1..={MAX_FACTORS}")));
        }
        if let Some(pos) = self.levels.iter().position(|&n| n == 0) {
            return Err(EblupError::InvalidDesign(format!("factor {} has zero levels", pos + 1)));
        }
        if self.random.is_empty() {
            return Err(EblupError::NoRandomEffects);
        }
        let last = self.last_bit();
        let full = self.tuple_count() as u32 - 1;
        for (k, &t) in self.random.iter().chain(std::iter::once(&self.fixed)).enumerate() {
            let what = if k == self.random.len() { "fixed tuple".to_string() } else { format!("random tuple {k}") };
            if t & !full != 0 {
                return Err(EblupError::InvalidDesign(format!("{what} has bits beyond factor {f}")));
            }
            if t & last == 0 {
                return Err(EblupError::InvalidDesign(format!("{what} must have last coordinate 1")));
            }
        }
        for (a, &t) in self.random.iter().enumerate() {
            if self.random[..a].contains(&t) {
                return Err(EblupError::InvalidDesign(format!("random tuple {a} repeated")));
            }
        }
        if self.n() <= self.p() {
            return Err(EblupError::TooFewObservations { n: self.n(), p: self.p() });
        }
        Ok(())
    }

    /// `w + 1`
    pub fn factors(&self) -> usize {
        self.levels.len()
    }

    fn last_bit(&self) -> u32 {
        1 << (self.levels.len() - 1)
    }

    /// `2^{w+1}`
    pub fn tuple_count(&self) -> usize {
        1 << self.levels.len()
    }

    pub fn n(&self) -> usize {
        self.levels.iter().product()
    }

    /// `r_i = prod_{i_l = 0} n_l`
    pub fn r(&self, tuple: u32) -> usize {
        self.levels.iter().enumerate().filter(|(l, _)| tuple >> l & 1 == 0).map(|(_, &n)| n).product()
    }

    /// `p = r_s`
    pub fn p(&self) -> usize {
        self.r(self.fixed)
    }

    /// Number of variance components `1 + |S|`.
    pub fn s(&self) -> usize {
        1 + self.random.len()
    }

    /// `(x)_l 1_{n_l}^{t_l}` as a dense `n x r_t` matrix.
    pub fn incidence(&self, tuple: u32) -> DMatrix<f64> {
        let mut out = DMatrix::from_element(1, 1, 1.0);
        for (l, &n) in self.levels.iter().enumerate() {
            let factor =
                if tuple >> l & 1 == 1 { DMatrix::from_element(n, 1, 1.0) } else { DMatrix::identity(n, n) };
            out = out.kronecker(&factor);
        }
        out
    }

    pub fn to_model(&self) -> Result<MixedModel> {
        self.validate()?;
        let blocks = self.random.iter().map(|&t| self.incidence(t)).collect();
        build_anova(self.incidence(self.fixed), blocks)
    }

    fn check_sigma(&self, sigma: &[f64]) -> Result<()> {
        if sigma.len() != self.s() {
            return Err(EblupError::DimensionMismatch { what: "sigma", expected: self.s(), found: sigma.len() });
        }
        for (i, &v) in sigma.iter().enumerate() {
            let bad = !v.is_finite() || if i == 0 { v <= 0.0 } else { v < 0.0 };
            if bad {
                return Err(EblupError::OutsideParameterSpace { index: i, value: v });
            }
        }
        Ok(())
    }
}

/// Coefficients of `sum_i c_i (x)_l J_{n_l}^{i_l}`, indexed by tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct KronCoefficients {
    pub coeff: Vec<f64>,
}

impl KronCoefficients {
    pub fn get(&self, tuple: u32) -> f64 {
        self.coeff[tuple as usize]
    }

    pub fn nonzero_count(&self) -> usize {
        self.coeff.iter().filter(|&&c| c != 0.0).count()
    }
}

/// `lambda_0 = sigma_0`, `lambda_i = sigma_i` for `i` in `S`, zero elsewhere.
pub fn sigma_coefficients(design: &BalancedDesign, sigma: &[f64]) -> Result<KronCoefficients> {
    design.validate()?;
    design.check_sigma(sigma)?;
    let mut coeff = vec![0.0; design.tuple_count()];
    coeff[0] = sigma[0];
    for (&t, &s) in design.random.iter().zip(&sigma[1..]) {
        coeff[t as usize] = s;
    }
    Ok(KronCoefficients { coeff })
}

/// Closed-form coefficients of `Sigma^-1`:
///
/// `tau_i = (r_i / n) sum_{j <= i} (-1)^{|{i_l = 1, j_l = 0}|} / (sigma_0 + sum_{k in S, k <= j} sigma_k n / r_k)`
pub fn tau_coefficients(design: &BalancedDesign, sigma: &[f64]) -> Result<KronCoefficients> {
    design.validate()?;
    design.check_sigma(sigma)?;
    let count = design.tuple_count();
    let n = design.n() as f64;
    // Eigenvalue of Sigma attached to each j.
    let eig: Vec<f64> = (0..count as u32)
        .map(|j| {
            sigma[0]
                + design
                    .random
                    .iter()
                    .zip(&sigma[1..])
                    .filter(|(&k, _)| k & !j == 0)
                    .map(|(&k, &s)| s * n / design.r(k) as f64)
                    .sum::<f64>()
        })
        .collect();
    let coeff = (0..count as u32)
        .map(|i| {
            let mut acc = 0.0;
            // Enumerate all submasks j of i.
            let mut j = i;
            loop {
                let sign = if (i & !j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign / eig[j as usize];
                if j == 0 {
                    break;
                }
                j = (j - 1) & i;
            }
            design.r(i) as f64 / n * acc
        })
        .collect();
    Ok(KronCoefficients { coeff })
}

fn digits(levels: &[usize], mut idx: usize) -> Vec<usize> {
    let mut d = vec![0; levels.len()];
    for l in (0..levels.len()).rev() {
        d[l] = idx % levels[l];
        idx /= levels[l];
    }
    d
}

/// Dense `sum_i c_i (x)_l J_{n_l}^{i_l}`.
pub fn expand(design: &BalancedDesign, coeffs: &KronCoefficients) -> Result<DMatrix<f64>> {
    if coeffs.coeff.len() != design.tuple_count() {
        return Err(EblupError::DimensionMismatch {
            what: "kron coefficients",
            expected: design.tuple_count(),
            found: coeffs.coeff.len(),
        });
    }
    // Entry (a, b) collects c_i over all i containing the set of factors
    // on which a and b differ.
    let count = design.tuple_count();
    let superset: Vec<f64> = (0..count)
        .map(|d| (0..count).filter(|&i| i & d == d).map(|i| coeffs.coeff[i]).sum())
        .collect();
    let n = design.n();
    let dig: Vec<Vec<usize>> = (0..n).map(|a| digits(&design.levels, a)).collect();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        let diff = dig[a].iter().zip(&dig[b]).enumerate().filter(|(_, (x, y))| x != y).fold(0, |m, (l, _)| m | 1 << l);
        superset[diff]
    }))
}

/// Sum `x` over every factor whose bit is set in `tuple`. The result is
/// indexed by the remaining factors in their original order.
fn sum_axes(levels: &[usize], tuple: u32, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut shape = levels.to_vec();
    for l in (0..levels.len()).rev() {
        if tuple >> l & 1 == 0 {
            continue;
        }
        let outer: usize = shape[..l].iter().product();
        let mid = shape[l];
        let inner: usize = shape[l + 1..].iter().product();
        let mut next = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for k in 0..inner {
                    next[o * inner + k] += cur[base + k];
                }
            }
        }
        shape[l] = 1;
        cur = next;
    }
    cur
}

/// Inverse of [`sum_axes`]'s shape change: repeat along the summed factors.
fn broadcast_axes(levels: &[usize], tuple: u32, x: &[f64]) -> Vec<f64> {
    let n: usize = levels.iter().product();
    let reduced: Vec<usize> = levels.iter().enumerate().map(|(l, &k)| if tuple >> l & 1 == 1 { 1 } else { k }).collect();
    (0..n)
        .map(|a| {
            let d = digits(levels, a);
            let idx = d.iter().zip(&reduced).fold(0, |acc, (&dl, &rl)| acc * rl + if rl == 1 { 0 } else { dl });
            x[idx]
        })
        .collect()
}

/// `((x)_l J_{n_l}^{t_l}) x` without forming the matrix.
pub fn kron_matvec(design: &BalancedDesign, tuple: u32, x: &[f64]) -> Vec<f64> {
    broadcast_axes(&design.levels, tuple, &sum_axes(&design.levels, tuple, x))
}

fn sigma_inv_apply(design: &BalancedDesign, tau: &KronCoefficients, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for (t, &c) in tau.coeff.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(kron_matvec(design, t as u32, y)) {
            *o += c * v;
        }
    }
    out
}

/// `P y = {I - (p/n) X X'} Sigma^-1 y` via the Kronecker structure.
pub fn projection_apply(design: &BalancedDesign, sigma: &[f64], y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != design.n() {
        return Err(EblupError::DimensionMismatch { what: "y", expected: design.n(), found: y.len() });
    }
    let tau = tau_coefficients(design, sigma)?;
    let u = sigma_inv_apply(design, &tau, y.as_slice());
    let xxu = kron_matvec(design, design.fixed, &u);
    let ratio = design.p() as f64 / design.n() as f64;
    Ok(DVector::from_iterator(u.len(), u.iter().zip(xxu).map(|(a, b)| a - ratio * b)))
}

/// Predicted random effects `v~_i = sigma_i Z_i' P y` for every `i` in `S`,
/// in the order of `design.random`.
pub fn blup_kron(design: &BalancedDesign, sigma: &[f64], y: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let py = projection_apply(design, sigma, y)?;
    Ok(design
        .random
        .iter()
        .zip(&sigma[1..])
        .map(|(&t, &s)| {
            let z = sum_axes(&design.levels, t, py.as_slice());
            DVector::from_iterator(z.len(), z.into_iter().map(|v| s * v))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCheck {
    pub residual: f64,
    pub passed: bool,
}

/// Max-abs difference between `P` from the dense likelihood path and
/// `{I - (p/n) X X'} expand(tau)`.
pub fn projection_identity_check(design: &BalancedDesign, sigma: &[f64]) -> Result<ProjectionCheck> {
    let model = design.to_model()?;
    let st = CovState::new(&model, sigma)?;
    let tau = tau_coefficients(design, sigma)?;
    let n = design.n();
    let mut xx = KronCoefficients { coeff: vec![0.0; design.tuple_count()] };
    xx.coeff[design.fixed as usize] = design.p() as f64 / n as f64;
    let rhs = (DMatrix::identity(n, n) - expand(design, &xx)?) * expand(design, &tau)?;
    let residual = (st.p() - rhs).amax();
    Ok(ProjectionCheck { residual, passed: residual < PROJECTION_TOL })
}
