//! Self-checks on seeded random instances: finite-difference derivative
//! checks, Kronecker inverse and BLUP checks, projection identities and
//! Monte Carlo moment checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EblupError, Result};
use crate::kron::{blup_kron, expand, projection_identity_check, sigma_coefficients, tau_coefficients, BalancedDesign};
use crate::likelihood::{CovState, Method};
use crate::model::{build_fay_herriot, build_nested_error, FamilyKind, MixedModel, PredictionTarget};
use crate::simulation::{quadratic_moment_check, score_moment_check, simulate_dataset};

pub const SCORE_REL_TOL: f64 = 1e-5;
pub const HESSIAN_REL_TOL: f64 = 1e-4;
pub const THIRD_REL_TOL: f64 = 1e-3;
pub const KRON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Derivatives,
    Kron,
    Projection,
    Moments,
}

impl std::str::FromStr for Suite {
    type Err = EblupError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "derivatives" => Ok(Suite::Derivatives),
            "kron" => Ok(Suite::Kron),
            "projection" => Ok(Suite::Projection),
            "moments" => Ok(Suite::Moments),
            _ => Err(EblupError::InvalidConfig(format!(
                "unknown suite '{s}', expected one of: all, derivatives, kron, projection, moments"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub suite: Suite,
    /// Restricts the derivative suite to one family.
    pub family: Option<FamilyKind>,
    /// Largest number of crossed factors `w` in random balanced designs.
    pub max_w: usize,
    pub instances: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { suite: Suite::All, family: None, max_w: 3, instances: 20, seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst error (or |z|) observed across instances.
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn design_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) })
}

/// Random instance of one family with `sigma` well inside the parameter
/// space and `y` simulated from it.
pub fn random_instance(kind: FamilyKind, rng: &mut ChaCha8Rng) -> Result<(MixedModel, Vec<f64>, DVector<f64>)> {
    let (model, sigma) = match kind {
        FamilyKind::FayHerriot => {
            let t = rng.random_range(5..=12);
            let p = rng.random_range(1..=3);
            let phi: Vec<f64> = (0..t).map(|_| uniform(rng, 0.5, 2.0)).collect();
            let x = design_matrix(rng, t, p);
            (build_fay_herriot(&phi, x)?, vec![uniform(rng, 0.5, 2.0)])
        }
        FamilyKind::NestedError => {
            let t = rng.random_range(3..=6);
            let groups: Vec<usize> =
                (0..t).flat_map(|g| std::iter::repeat_n(g, rng.random_range(1..=4))).collect();
            let p = rng.random_range(1..=2).min(groups.len() - 1);
            let x = design_matrix(rng, groups.len(), p);
            (build_nested_error(&groups, x)?, vec![uniform(rng, 0.5, 2.0), uniform(rng, 0.2, 2.0)])
        }
        FamilyKind::Anova => {
            let design = random_design(rng, 2)?;
            let mut sigma = vec![uniform(rng, 0.5, 2.0)];
            sigma.extend((0..design.random.len()).map(|_| uniform(rng, 0.2, 2.0)));
            (design.to_model()?, sigma)
        }
    };
    let beta: Vec<f64> = (0..model.p()).map(|_| rng.sample(StandardNormal)).collect();
    let y = simulate_dataset(&model, &sigma, &beta, rng.random())?;
    Ok((model, sigma, y))
}

/// Random balanced design with `1 <= w <= max_w` crossed factors,
/// `n_l` in `[2, 4]` and `1 <= |S| <= 3`.
pub fn random_design(rng: &mut ChaCha8Rng, max_w: usize) -> Result<BalancedDesign> {
    let w = rng.random_range(1..=max_w.max(1));
    let levels: Vec<usize> = (0..=w).map(|_| rng.random_range(2..=4)).collect();
    let last = 1u32 << w;
    let mut pool: Vec<u32> = (0..(1u32 << w)).map(|t| t | last).collect();
    let q = rng.random_range(1..=pool.len().min(3));
    let mut random = Vec::with_capacity(q);
    for _ in 0..q {
        random.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    let fixed = rng.random_range(0..(1u32 << w)) | last;
    BalancedDesign::new(levels, random, fixed)
}

/// Random `sigma` for a balanced design: `sigma_0` in `[0.5, 2]`, the rest
/// in `[0, 2]`.
pub fn random_design_sigma(design: &BalancedDesign, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut s = vec![uniform(rng, 0.5, 2.0)];
    s.extend((0..design.random.len()).map(|_| uniform(rng, 0.0, 2.0)));
    s
}

fn fd_step(v: f64) -> f64 {
    1e-4 * v.abs().max(1.0)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn shifted(sigma: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut s = sigma.to_vec();
    s[i] += h;
    s
}

/// Relative errors of the score, Hessian and third derivatives against
/// central differences of the loglikelihood, score and Hessian.
pub fn derivative_errors(model: &MixedModel, sigma: &[f64], y: &DVector<f64>, method: Method) -> Result<[f64; 3]> {
    let st = CovState::new(model, sigma)?;
    let s = model.s();
    let score = st.score(y, method);
    let hess = st.hessian(y, method);
    let third = st.third_derivatives(y, method);
    let mut fd_score = Vec::with_capacity(s);
    let mut fd_hess = Vec::with_capacity(s * s);
    let mut fd_third = Vec::with_capacity(s * s * s);
    for i in 0..s {
        let h = fd_step(sigma[i]);
        let plus = CovState::new(model, &shifted(sigma, i, h))?;
        let minus = CovState::new(model, &shifted(sigma, i, -h))?;
        fd_score.push((plus.loglik(y, method) - minus.loglik(y, method)) / (2.0 * h));
        let ds = (plus.score(y, method) - minus.score(y, method)) / (2.0 * h);
        let dh = (plus.hessian(y, method) - minus.hessian(y, method)) / (2.0 * h);
        for j in 0..s {
            fd_hess.push(ds[j]);
            for k in 0..s {
                fd_third.push(dh[(j, k)]);
            }
        }
    }
    let an_hess: Vec<f64> = (0..s).flat_map(|i| (0..s).map(move |j| (i, j))).map(|(i, j)| hess[(j, i)]).collect();
    let an_third: Vec<f64> = (0..s)
        .flat_map(|i| (0..s).flat_map(move |j| (0..s).map(move |k| (i, j, k))))
        .map(|(i, j, k)| third.get(j, k, i))
        .collect();
    Ok([
        rel_err(score.as_slice(), &fd_score),
        rel_err(&an_hess, &fd_hess),
        rel_err(&an_third, &fd_third),
    ])
}

fn result(name: &str, worst: f64, tolerance: f64, instances: usize, strict_less: bool) -> CheckResult {
    let passed = if strict_less { worst < tolerance } else { worst <= tolerance };
    CheckResult { name: name.into(), passed: passed && worst.is_finite(), worst, tolerance, instances }
}

fn derivative_suite(opts: &CheckOptions, rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let kinds: Vec<FamilyKind> = opts.family.map_or_else(|| FamilyKind::ALL.to_vec(), |k| vec![k]);
    for kind in kinds {
        for method in [Method::Reml, Method::Ml] {
            let mut worst = [0.0f64; 3];
            for _ in 0..opts.instances {
                let (m, sigma, y) = random_instance(kind, rng)?;
                let e = derivative_errors(&m, &sigma, &y, method)?;
                for (w, v) in worst.iter_mut().zip(e) {
                    *w = w.max(v);
                }
            }
            let tag = format!("{}/{}", kind.name(), method.name());
            out.push(result(&format!("score-fd/{tag}"), worst[0], SCORE_REL_TOL, opts.instances, false));
            out.push(result(&format!("hessian-fd/{tag}"), worst[1], HESSIAN_REL_TOL, opts.instances, false));
            out.push(result(&format!("third-fd/{tag}"), worst[2], THIRD_REL_TOL, opts.instances, false));
        }
    }
    Ok(())
}

fn kron_suite(opts: &CheckOptions, rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let (mut inv, mut blup) = (0.0f64, 0.0f64);
    for _ in 0..opts.instances {
        let d = random_design(rng, opts.max_w)?;
        let sigma = random_design_sigma(&d, rng);
        let lam = expand(&d, &sigma_coefficients(&d, &sigma)?)?;
        let tau = expand(&d, &tau_coefficients(&d, &sigma)?)?;
        inv = inv.max((lam * tau - DMatrix::identity(d.n(), d.n())).amax());

        let model = d.to_model()?;
        let beta = vec![1.0; model.p()];
        let y = simulate_dataset(&model, &sigma, &beta, rng.random())?;
        let fast = blup_kron(&d, &sigma, &y)?;
        let zero = PredictionTarget::new(&model, DVector::zeros(model.p()), DVector::zeros(model.r()))?;
        let dense = CovState::new(&model, &sigma)?.blup(&y, &zero).v_tilde;
        let flat: Vec<f64> = fast.iter().flat_map(|v| v.iter().copied()).collect();
        blup = blup.max((dense - DVector::from_vec(flat)).amax());
    }
    out.push(result("kron-inverse", inv, KRON_TOL, opts.instances, true));
    out.push(result("kron-blup", blup, KRON_TOL, opts.instances, true));
    Ok(())
}

fn projection_suite(opts: &CheckOptions, rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let (mut px, mut psp, mut balanced) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..opts.instances {
        let (m, sigma, _) = random_instance(FamilyKind::ALL[k % 3], rng)?;
        let st = CovState::new(&m, &sigma)?;
        let p = st.p();
        let scale = p.amax().max(1.0);
        px = px.max((p * m.x()).amax() / scale);
        let sig = m.assemble_sigma(&sigma)?;
        psp = psp.max((p * sig * p - p).amax() / scale);

        let d = random_design(rng, opts.max_w)?;
        let s = random_design_sigma(&d, rng);
        balanced = balanced.max(projection_identity_check(&d, &s)?.residual);
    }
    out.push(result("projection-px", px, KRON_TOL, opts.instances, true));
    out.push(result("projection-psp", psp, KRON_TOL, opts.instances, true));
    out.push(result("projection-balanced", balanced, KRON_TOL, opts.instances, true));
    Ok(())
}

fn random_symmetric(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&b + b.transpose()) * 0.5
}

/// Random positive definite `k x k` matrix `B B' / k + I / 2`.
pub fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5
}

/// `(Sigma, A_1, A_2)` for a quadratic moment check.
pub fn random_moment_instance(rng: &mut ChaCha8Rng, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let s = random_spd(rng, k);
    let a1 = random_symmetric(rng, k);
    let a2 = random_symmetric(rng, k);
    (s, a1, a2)
}

fn moment_suite(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (s, a1, a2) = random_moment_instance(rng, 4);
        worst = worst.max(quadratic_moment_check(&s, &a1, &a2, 10_000, rng.random())?.max_abs_z);
    }
    out.push(result("quadratic-moments", worst, 5.0, 5, true));

    let t = 20;
    let phi: Vec<f64> = (0..t).map(|_| uniform(rng, 0.5, 2.0)).collect();
    let m = build_fay_herriot(&phi, DMatrix::from_element(t, 1, 1.0))?;
    let mut mean_z = 0.0f64;
    let mut cov_z = 0.0f64;
    for method in [Method::Reml, Method::Ml] {
        let sm = score_moment_check(&m, &[1.0], &[0.0], 2000, rng.random(), method)?;
        mean_z = sm.mean_z.iter().map(|z| z.map_or(f64::INFINITY, f64::abs)).fold(mean_z, f64::max);
        if method == Method::Reml {
            cov_z = sm.cov_z.iter().map(|z| z.map_or(f64::INFINITY, f64::abs)).fold(cov_z, f64::max);
        }
    }
    out.push(result("score-mean", mean_z, 3.0, 2, true));
    out.push(result("score-covariance", cov_z, 5.0, 1, true));
    Ok(())
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    if opts.instances == 0 {
        return Err(EblupError::InvalidConfig("instances must be positive".into()));
    }
    if opts.max_w == 0 || opts.max_w > crate::kron::MAX_FACTORS - 1 {
        return Err(EblupError::InvalidConfig(format!("w must lie in 1..={}", crate::kron::MAX_FACTORS - 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::new();
    let all = opts.suite == Suite::All;
    if all || opts.suite == Suite::Derivatives {
        derivative_suite(opts, &mut rng, &mut results)?;
    }
    if all || opts.suite == Suite::Kron {
        kron_suite(opts, &mut rng, &mut results)?;
    }
    if all || opts.suite == Suite::Projection {
        projection_suite(opts, &mut rng, &mut results)?;
    }
    if all || opts.suite == Suite::Moments {
        moment_suite(&mut rng, &mut results)?;
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(CheckReport { seed: opts.seed, results, passed })
}
