//! Mixed linear models `y = X beta + Z v + e` with `cov(v) = G(sigma)`,
//! `cov(e) = R(sigma)` and `cov(y) = Sigma = R + Z G Z'`.
//!
//! Three covariance families are supported:
//!
//! * ANOVA variance components: `Sigma = sigma_0 I + sum_i sigma_i Z_i Z_i'`.
//! * Fay-Herriot: `Sigma = sigma I + diag(phi)` with known sampling variances.
//! * Nested error regression: block diagonal with blocks
//!   `sigma_0 I + sigma_1 J` per group.
//!
//! In every family `G` and `R` are diagonal and `Sigma` is affine in
//! `sigma`, so `d Sigma / d sigma_i` is a constant matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EblupError, Result};
use crate::linalg::{self, SymMatrix};

/// Relative singular-value tolerance for the full-rank check on `X`.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Absolute tolerance used to flag a component as sitting on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Anova,
    FayHerriot,
    NestedError,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [FamilyKind::FayHerriot, FamilyKind::NestedError, FamilyKind::Anova];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Anova => "anova",
            FamilyKind::FayHerriot => "fay-herriot",
            FamilyKind::NestedError => "nested-error",
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        FamilyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let allowed: Vec<_> = FamilyKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown family `{s}`; allowed: {}", allowed.join(", "))
            })
    }
}

/// Structural data of the covariance family.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceFamily {
    /// `Z = (Z_1, ..., Z_q)` with `Z_i` of width `block_sizes[i]`.
    Anova { block_sizes: Vec<usize> },
    FayHerriot { phi: DVector<f64> },
    NestedError { group_sizes: Vec<usize> },
}

impl CovarianceFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            CovarianceFamily::Anova { .. } => FamilyKind::Anova,
            CovarianceFamily::FayHerriot { .. } => FamilyKind::FayHerriot,
            CovarianceFamily::NestedError { .. } => FamilyKind::NestedError,
        }
    }

    /// Dimension of `sigma`.
    pub fn s(&self) -> usize {
        match self {
            CovarianceFamily::Anova { block_sizes } => block_sizes.len() + 1,
            CovarianceFamily::FayHerriot { .. } => 1,
            CovarianceFamily::NestedError { .. } => 2,
        }
    }

    /// Total random-effect dimension `r`.
    pub fn random_dim(&self) -> usize {
        match self {
            CovarianceFamily::Anova { block_sizes } => block_sizes.iter().sum(),
            CovarianceFamily::FayHerriot { phi } => phi.len(),
            CovarianceFamily::NestedError { group_sizes } => group_sizes.len(),
        }
    }

    /// Whether the parameter space requires `sigma[i] > 0` strictly.
    pub fn strictly_positive(&self, i: usize) -> bool {
        matches!(self, CovarianceFamily::NestedError { .. }) && i == 0
    }
}

/// Optional display names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub observations: Option<Vec<String>>,
    pub effects: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct MixedModel {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    family: CovarianceFamily,
    /// `d Sigma / d sigma_i`.
    derivs: Vec<SymMatrix>,
    /// Random-effect column ranges per component, for `dG/d sigma_i`.
    g_ranges: Vec<Option<(usize, usize)>>,
    pub labels: Labels,
}

/// Variance parameters validated against the family's parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaVector {
    pub values: Vec<f64>,
    pub boundary_flags: Vec<bool>,
}

impl SigmaVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn on_boundary(&self) -> bool {
        self.boundary_flags.iter().any(|&b| b)
    }
}

/// Coefficients of the mixed effect `mu = l' beta + m' v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTarget {
    pub l: DVector<f64>,
    pub m: DVector<f64>,
}

impl PredictionTarget {
    pub fn new(model: &MixedModel, l: DVector<f64>, m: DVector<f64>) -> Result<Self> {
        check_len("target l", model.p(), l.len())?;
        check_len("target m", model.r(), m.len())?;
        if l.iter().chain(m.iter()).any(|v| !v.is_finite()) {
            return Err(EblupError::NonFinite { what: "prediction target" });
        }
        Ok(Self { l, m })
    }

    /// Area (group) mean `x_i' beta + v_i` for Fay-Herriot and nested-error
    /// models. For nested error the covariate vector is the within-group
    /// mean of the rows of `X`.
    pub fn area_mean(model: &MixedModel, area: usize) -> Result<Self> {
        let r = model.r();
        if area >= r {
            return Err(EblupError::IndexOutOfRange { index: area, len: r });
        }
        let l = match model.family() {
            CovarianceFamily::FayHerriot { .. } => model.x().row(area).transpose(),
            CovarianceFamily::NestedError { .. } => {
                let col = model.z().column(area);
                let count: f64 = col.sum();
                (model.x().transpose() * col) / count
            }
            CovarianceFamily::Anova { .. } => {
                return Err(EblupError::InvalidConfig(
                    "area targets are defined for fay-herriot and nested-error models".into(),
                ))
            }
        };
        let mut m = DVector::zeros(r);
        m[area] = 1.0;
        Self::new(model, l, m)
    }

    /// Pure fixed-effect target `e_j' beta`.
    pub fn fixed_effect(model: &MixedModel, j: usize) -> Result<Self> {
        if j >= model.p() {
            return Err(EblupError::IndexOutOfRange { index: j, len: model.p() });
        }
        let mut l = DVector::zeros(model.p());
        l[j] = 1.0;
        Self::new(model, l, DVector::zeros(model.r()))
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(EblupError::DimensionMismatch { what, expected, found });
    }
    Ok(())
}

fn check_x(x: &DMatrix<f64>) -> Result<()> {
    let (n, p) = x.shape();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EblupError::NonFinite { what: "X" });
    }
    if p == 0 {
        return Err(EblupError::DimensionMismatch { what: "columns of X", expected: 1, found: 0 });
    }
    if n <= p {
        return Err(EblupError::TooFewObservations { n, p });
    }
    let rank = linalg::numerical_rank(x, RANK_REL_TOL);
    if rank < p {
        return Err(EblupError::RankDeficientX { rank, p });
    }
    Ok(())
}

/// Fay-Herriot area-level model: `Z = I_t`, `G = sigma I_t`, `R = diag(phi)`.
pub fn build_fay_herriot(phi: &[f64], x: DMatrix<f64>) -> Result<MixedModel> {
    let t = phi.len();
    check_len("rows of X", t, x.nrows())?;
    for (index, &value) in phi.iter().enumerate() {
        if !value.is_finite() {
            return Err(EblupError::NonFinite { what: "phi" });
        }
        if value <= 0.0 {
            return Err(EblupError::NonPositivePhi { index, value });
        }
    }
    check_x(&x)?;
    Ok(MixedModel {
        x,
        z: DMatrix::identity(t, t),
        family: CovarianceFamily::FayHerriot { phi: DVector::from_column_slice(phi) },
        derivs: vec![SymMatrix::Identity(t)],
        g_ranges: vec![Some((0, t))],
        labels: Labels::default(),
    })
}

/// Nested error regression. `groups[row]` is the 0-based group of each row;
/// every group index below the maximum must occur at least once.
pub fn build_nested_error(groups: &[usize], x: DMatrix<f64>) -> Result<MixedModel> {
    let n = groups.len();
    check_len("rows of X", n, x.nrows())?;
    let t = groups.iter().max().map_or(0, |&g| g + 1);
    let mut sizes = vec![0usize; t];
    for &g in groups {
        sizes[g] += 1;
    }
    if t == 0 {
        return Err(EblupError::EmptyGroup { group: 0 });
    }
    if let Some(group) = sizes.iter().position(|&c| c == 0) {
        return Err(EblupError::EmptyGroup { group });
    }
    check_x(&x)?;
    let mut z = DMatrix::zeros(n, t);
    for (row, &g) in groups.iter().enumerate() {
        z[(row, g)] = 1.0;
    }
    let zzt = &z * z.transpose();
    Ok(MixedModel {
        x,
        z,
        family: CovarianceFamily::NestedError { group_sizes: sizes },
        derivs: vec![SymMatrix::Identity(n), SymMatrix::Dense(zzt)],
        g_ranges: vec![None, Some((0, t))],
        labels: Labels::default(),
    })
}

/// ANOVA model `y = X beta + sum_i Z_i v_i + e`, `V_0 = I`, `V_i = Z_i Z_i'`.
pub fn build_anova(x: DMatrix<f64>, blocks: Vec<DMatrix<f64>>) -> Result<MixedModel> {
    let n = x.nrows();
    if blocks.is_empty() {
        return Err(EblupError::NoRandomEffects);
    }
    for (index, b) in blocks.iter().enumerate() {
        check_len("rows of Z block", n, b.nrows())?;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(EblupError::NonFinite { what: "Z block" });
        }
        if b.ncols() == 0 || b.iter().all(|&v| v == 0.0) {
            return Err(EblupError::ZeroBlock { index: index + 1 });
        }
    }
    check_x(&x)?;
    let block_sizes: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
    let r: usize = block_sizes.iter().sum();
    let mut z = DMatrix::zeros(n, r);
    let mut derivs = vec![SymMatrix::Identity(n)];
    let mut g_ranges = vec![None];
    let mut offset = 0;
    for b in &blocks {
        z.view_mut((0, offset), (n, b.ncols())).copy_from(b);
        derivs.push(SymMatrix::Dense(b * b.transpose()));
        g_ranges.push(Some((offset, offset + b.ncols())));
        offset += b.ncols();
    }
    Ok(MixedModel {
        x,
        z,
        family: CovarianceFamily::Anova { block_sizes },
        derivs,
        g_ranges,
        labels: Labels::default(),
    })
}

impl MixedModel {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn r(&self) -> usize {
        self.z.ncols()
    }

    pub fn s(&self) -> usize {
        self.family.s()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn family(&self) -> &CovarianceFamily {
        &self.family
    }

    pub fn kind(&self) -> FamilyKind {
        self.family.kind()
    }

    pub(crate) fn deriv(&self, i: usize) -> &SymMatrix {
        &self.derivs[i]
    }

    pub(crate) fn check_sigma_len(&self, sigma: &[f64]) -> Result<()> {
        check_len("sigma", self.s(), sigma.len())?;
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(EblupError::NonFinite { what: "sigma" });
        }
        Ok(())
    }

    pub(crate) fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        check_len("y", self.n(), y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(EblupError::NonFinite { what: "y" });
        }
        Ok(())
    }

    /// Diagonal of `G(sigma)`.
    pub fn g_diag(&self, sigma: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.r());
        for (i, range) in self.g_ranges.iter().enumerate() {
            if let Some((a, b)) = *range {
                g.rows_mut(a, b - a).fill(sigma[i]);
            }
        }
        g
    }

    /// Diagonal of `dG / d sigma_i`.
    pub fn dg_diag(&self, i: usize) -> DVector<f64> {
        let mut g = DVector::zeros(self.r());
        if let Some((a, b)) = self.g_ranges[i] {
            g.rows_mut(a, b - a).fill(1.0);
        }
        g
    }

    /// Diagonal of `R(sigma)`.
    pub fn r_diag(&self, sigma: &[f64]) -> DVector<f64> {
        match &self.family {
            CovarianceFamily::FayHerriot { phi } => phi.clone(),
            _ => DVector::from_element(self.n(), sigma[0]),
        }
    }

    /// `Sigma(sigma)` without a definiteness check.
    pub(crate) fn sigma_matrix(&self, sigma: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        if let CovarianceFamily::FayHerriot { phi } = &self.family {
            m.set_diagonal(phi);
        }
        for (i, d) in self.derivs.iter().enumerate() {
            if sigma[i] != 0.0 {
                d.add_scaled_to(&mut m, sigma[i]);
            }
        }
        linalg::symmetrize(&mut m);
        m
    }

    /// `Sigma(sigma) = R + Z G Z'`, checked to be positive definite.
    pub fn assemble_sigma(&self, sigma: &[f64]) -> Result<DMatrix<f64>> {
        self.check_sigma_len(sigma)?;
        let m = self.sigma_matrix(sigma);
        linalg::SpdFactor::new(&m)?;
        Ok(m)
    }

    /// The constant matrix `d Sigma / d sigma_i`.
    pub fn sigma_derivative(&self, i: usize) -> Result<DMatrix<f64>> {
        if i >= self.s() {
            return Err(EblupError::IndexOutOfRange { index: i, len: self.s() });
        }
        Ok(self.derivs[i].to_dense())
    }

    /// Check `values` against the parameter space and flag boundary
    /// components. Positive definiteness is checked separately.
    pub fn validate_sigma(&self, values: &[f64]) -> Result<SigmaVector> {
        self.check_sigma_len(values)?;
        let mut flags = Vec::with_capacity(values.len());
        for (index, &value) in values.iter().enumerate() {
            let strict = self.family.strictly_positive(index);
            if value < 0.0 || (strict && value <= 0.0) {
                return Err(EblupError::OutsideParameterSpace { index, value });
            }
            flags.push(value.abs() <= BOUNDARY_TOL);
        }
        Ok(SigmaVector { values: values.to_vec(), boundary_flags: flags })
    }
}
