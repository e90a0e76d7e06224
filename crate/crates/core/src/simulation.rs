//! Monte Carlo harness: data generation, replicate studies of the EBLUP and
//! its MSE estimators, and moment checks for scores and quadratic forms.
//!
//! Replicate `r` draws from `ChaCha8Rng::seed_from_u64(base_seed + r)`, and
//! replicate results are reduced in index order with compensated summation,
//! so a report does not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EblupError, Result};
use crate::estimation::{fit, FitOptions};
use crate::kron::BalancedDesign;
use crate::likelihood::{CovState, Method};
use crate::model::{build_fay_herriot, build_nested_error, MixedModel, PredictionTarget};
use crate::mse::report_at;
use crate::prediction::fit_warnings;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "EBLUP_THREADS";

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 3] = ["harville-jeske-balanced", "unbalanced-small", "unbalanced-large"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    FayHerriot { phi: Vec<f64>, x: Vec<Vec<f64>> },
    NestedError { groups: Vec<usize>, x: Vec<Vec<f64>> },
    Anova { design: BalancedDesign },
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != p) {
        return Err(EblupError::InvalidConfig(format!("row {i} of x has {} entries, expected {p}", rows[i].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn to_model(&self) -> Result<MixedModel> {
        match self {
            ModelSpec::FayHerriot { phi, x } => build_fay_herriot(phi, rows_to_matrix(x)?),
            ModelSpec::NestedError { groups, x } => build_nested_error(groups, rows_to_matrix(x)?),
            ModelSpec::Anova { design } => design.to_model(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `mu_i = x_i' beta + v_i` for an area or group.
    AreaMean(usize),
    Custom { name: String, l: Vec<f64>, m: Vec<f64> },
}

impl TargetSpec {
    pub fn name(&self) -> String {
        match self {
            TargetSpec::AreaMean(i) => format!("area-{i}"),
            TargetSpec::Custom { name, .. } => name.clone(),
        }
    }

    pub fn build(&self, model: &MixedModel) -> Result<PredictionTarget> {
        match self {
            TargetSpec::AreaMean(i) => PredictionTarget::area_mean(model, *i),
            TargetSpec::Custom { l, m, .. } => {
                PredictionTarget::new(model, DVector::from_column_slice(l), DVector::from_column_slice(m))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Naive,
    PrasadRao,
    SecondOrder,
    DataSpecific,
}

impl Estimator {
    pub const ALL: [Estimator; 4] =
        [Estimator::Naive, Estimator::PrasadRao, Estimator::SecondOrder, Estimator::DataSpecific];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::PrasadRao => "prasad-rao",
            Estimator::SecondOrder => "second-order",
            Estimator::DataSpecific => "data-specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub model: ModelSpec,
    pub sigma: Vec<f64>,
    pub beta: Vec<f64>,
    pub targets: Vec<TargetSpec>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub base_seed: u64,
    pub estimators: Vec<Estimator>,
}

impl McConfig {
    /// Checks the config and returns warnings that do not prevent a run.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.replicates < 2 {
            return Err(EblupError::InvalidConfig(format!("replicates must be at least 2, got {}", self.replicates)));
        }
        if self.methods.is_empty() || self.targets.is_empty() || self.estimators.is_empty() {
            return Err(EblupError::InvalidConfig("methods, targets and estimators must be non-empty".into()));
        }
        let model = self.model.to_model()?;
        if self.beta.len() != model.p() {
            return Err(EblupError::InvalidConfig(format!(
                "beta has {} entries, model has {} fixed effects",
                self.beta.len(),
                model.p()
            )));
        }
        let sv = model.validate_sigma(&self.sigma)?;
        model.assemble_sigma(&self.sigma)?;
        for t in &self.targets {
            t.build(&model)?;
        }
        let mut warnings = Vec::new();
        if sv.on_boundary() {
            warnings.push("true sigma lies on the boundary of the parameter space".to_string());
        }
        Ok(warnings)
    }
}

/// Harville-Jeske style one-way designs with `gamma = sigma_1 / sigma_0 = 0.1`,
/// targeting `beta + v_1`.
pub fn preset(name: &str) -> Result<McConfig> {
    let sizes: Vec<usize> = match name {
        "harville-jeske-balanced" => vec![2; 9],
        "unbalanced-small" => [vec![1; 8], vec![10]].concat(),
        "unbalanced-large" => [vec![1; 20], vec![50]].concat(),
        _ => {
            return Err(EblupError::InvalidConfig(format!(
                "unknown preset '{name}', expected one of: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let groups: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &k)| std::iter::repeat_n(g, k)).collect();
    let x = vec![vec![1.0]; groups.len()];
    Ok(McConfig {
        model: ModelSpec::NestedError { groups, x },
        sigma: vec![1.0, 0.1],
        beta: vec![0.0],
        targets: vec![TargetSpec::AreaMean(0)],
        methods: vec![Method::Reml],
        replicates: 1000,
        base_seed: 1,
        estimators: Estimator::ALL.to_vec(),
    })
}

fn draw_effects(model: &MixedModel, sigma: &[f64], beta: &[f64], seed: u64) -> Result<(DVector<f64>, DVector<f64>)> {
    model.validate_sigma(sigma)?;
    if beta.len() != model.p() {
        return Err(EblupError::DimensionMismatch { what: "beta", expected: model.p(), found: beta.len() });
    }
    model.assemble_sigma(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = model.g_diag(sigma);
    let r = model.r_diag(sigma);
    let v = g.map(|gi| {
        let z: f64 = StandardNormal.sample(&mut rng);
        gi.max(0.0).sqrt() * z
    });
    let e = r.map(|ri| {
        let z: f64 = StandardNormal.sample(&mut rng);
        ri.max(0.0).sqrt() * z
    });
    let y = model.x() * DVector::from_column_slice(beta) + model.z() * &v + e;
    Ok((y, v))
}

/// `y = X beta + Z v + e` with independent normal `v ~ N(0, G)` and
/// `e ~ N(0, R)`, drawn from a stream keyed by `seed`.
pub fn simulate_dataset(model: &MixedModel, sigma: &[f64], beta: &[f64], seed: u64) -> Result<DVector<f64>> {
    draw_effects(model, sigma, beta, seed).map(|(y, _)| y)
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn csum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut acc = Compensated::default();
    xs.for_each(|x| acc.add(x));
    acc.value()
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn from_values(xs: &[f64]) -> Stat {
        let k = xs.len() as f64;
        if xs.is_empty() {
            return Stat { mean: 0.0, se: 0.0 };
        }
        let mean = csum(xs.iter().copied()) / k;
        if xs.len() < 2 {
            return Stat { mean, se: 0.0 };
        }
        let ss = csum(xs.iter().map(|x| (x - mean) * (x - mean)));
        Stat { mean, se: (ss / (k - 1.0) / k).sqrt() }
    }

    /// `(mean - target) / se`, absent when `se = 0`.
    pub fn z(&self, target: f64) -> Option<f64> {
        (self.se > 0.0).then(|| (self.mean - target) / self.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthTerms {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g10: Option<f64>,
    /// `g1 + g2 + g3` at the true `sigma`.
    pub mse_approx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub count: usize,
    pub value: Stat,
    /// `(mean - empirical_mse_cv) / empirical_mse_cv`
    pub relative_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSummary {
    pub target: String,
    pub method: Method,
    pub replicates_used: usize,
    pub truth: TruthTerms,
    /// `mean (t(sigma_hat) - mu)^2`
    pub empirical_mse: Stat,
    /// `mean (t(sigma) - mu)^2`
    pub empirical_mse_known: Stat,
    /// `mean [(t(sigma_hat) - mu)^2 - (t(sigma) - mu)^2] + g1 + g2`, using the
    /// exact MSE of the known-sigma BLUP as a control variate.
    pub empirical_mse_cv: Stat,
    /// `empirical_mse >= empirical_mse_known - 3 SE`
    pub ordering_holds: bool,
    pub estimators: Vec<EstimatorSummary>,
    pub g3_data: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMoments {
    pub method: Method,
    pub replicates: usize,
    /// Monte Carlo mean of the score at the true `sigma`.
    pub mean: Vec<Stat>,
    /// `0` for REML, `-g_M0` for ML.
    pub mean_target: Vec<f64>,
    pub mean_z: Vec<Option<f64>>,
    /// Row-major `s x s` covariance estimate, centered at `mean_target`.
    pub cov: Vec<Stat>,
    /// `1/2 tr(P V_i P V_j)`, which is `-A_R`.
    pub cov_target: Vec<f64>,
    pub cov_z: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSummary {
    pub method: Method,
    pub failures: usize,
    pub boundary_hits: usize,
    pub boundary_rate: f64,
    pub score: ScoreMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McReport {
    pub replicates: usize,
    pub base_seed: u64,
    pub methods: Vec<MethodSummary>,
    pub targets: Vec<TargetSummary>,
    pub warnings: Vec<String>,
}

/// One CSV row per target, method and estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub target: String,
    pub method: Method,
    pub estimator: Estimator,
    pub count: usize,
    pub mean: f64,
    pub se: f64,
    pub empirical_mse: f64,
    pub empirical_mse_se: f64,
    pub empirical_mse_cv: f64,
    pub empirical_mse_cv_se: f64,
    pub mse_approx: f64,
    pub relative_bias: Option<f64>,
}

impl McReport {
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.targets
            .iter()
            .flat_map(|t| {
                t.estimators.iter().map(move |e| CsvRow {
                    target: t.target.clone(),
                    method: t.method,
                    estimator: e.estimator,
                    count: e.count,
                    mean: e.value.mean,
                    se: e.value.se,
                    empirical_mse: t.empirical_mse.mean,
                    empirical_mse_se: t.empirical_mse.se,
                    empirical_mse_cv: t.empirical_mse_cv.mean,
                    empirical_mse_cv_se: t.empirical_mse_cv.se,
                    mse_approx: t.truth.mse_approx,
                    relative_bias: e.relative_bias,
                })
            })
            .collect()
    }

    pub fn target(&self, name: &str, method: Method) -> Option<&TargetSummary> {
        self.targets.iter().find(|t| t.target == name && t.method == method)
    }

    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

impl TargetSummary {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}

struct TargetOutcome {
    err_hat2: f64,
    err_true2: f64,
    naive: f64,
    prasad_rao: Option<f64>,
    second_order: Option<f64>,
    data_specific: Option<f64>,
    g3_data: Option<f64>,
}

struct MethodOutcome {
    score: DVector<f64>,
    /// `None` when the fit failed or did not converge.
    fitted: Option<(bool, Vec<TargetOutcome>)>,
}

struct Prepared<'m> {
    model: &'m MixedModel,
    truth: CovState<'m>,
    targets: Vec<PredictionTarget>,
    data_specific: bool,
}

fn replicate(prep: &Prepared<'_>, cfg: &McConfig, r: usize) -> Result<Vec<MethodOutcome>> {
    let seed = cfg.base_seed.wrapping_add(r as u64);
    let (y, v) = draw_effects(prep.model, &cfg.sigma, &cfg.beta, seed)?;
    let beta = DVector::from_column_slice(&cfg.beta);
    let known: Vec<f64> = prep.targets.iter().map(|t| prep.truth.blup(&y, t).value).collect();
    let mu: Vec<f64> = prep.targets.iter().map(|t| t.l.dot(&beta) + t.m.dot(&v)).collect();
    Ok(cfg
        .methods
        .iter()
        .map(|&method| {
            let score = prep.truth.score(&y, method);
            let fitted = fit_one(prep, &y, method, &known, &mu);
            MethodOutcome { score, fitted }
        })
        .collect())
}

fn fit_one(
    prep: &Prepared<'_>,
    y: &DVector<f64>,
    method: Method,
    known: &[f64],
    mu: &[f64],
) -> Option<(bool, Vec<TargetOutcome>)> {
    let f = fit(prep.model, y, method, &FitOptions::default()).ok()?;
    if !f.converged {
        return None;
    }
    let st = CovState::new(prep.model, f.sigma_hat.as_slice()).ok()?;
    let mut out = Vec::with_capacity(prep.targets.len());
    for (k, t) in prep.targets.iter().enumerate() {
        let eblup = st.blup(y, t).value;
        let rep = report_at(&st, &f.information, fit_warnings(&f), y, t, prep.data_specific).ok()?;
        out.push(TargetOutcome {
            err_hat2: (eblup - mu[k]).powi(2),
            err_true2: (known[k] - mu[k]).powi(2),
            naive: rep.naive,
            prasad_rao: rep.prasad_rao,
            second_order: rep.second_order,
            data_specific: rep.second_order_data,
            g3_data: rep.g3_data,
        });
    }
    Some((f.boundary_hit, out))
}

/// Worker count from `EBLUP_THREADS`, defaulting to the available
/// parallelism.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_study(config: &McConfig) -> Result<McReport> {
    run_study_with_threads(config, threads_from_env())
}

pub fn run_study_with_threads(config: &McConfig, threads: usize) -> Result<McReport> {
    let warnings = config.validate()?;
    let model = config.model.to_model()?;
    let targets: Vec<PredictionTarget> = config.targets.iter().map(|t| t.build(&model)).collect::<Result<_>>()?;
    let prep = Prepared {
        model: &model,
        truth: CovState::new(&model, &config.sigma)?,
        targets,
        data_specific: config.estimators.contains(&Estimator::DataSpecific),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| EblupError::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<Vec<MethodOutcome>> =
        pool.install(|| (0..config.replicates).into_par_iter().map(|r| replicate(&prep, config, r)).collect::<Result<_>>())?;

    let mut methods = Vec::new();
    let mut summaries = Vec::new();
    for (mi, &method) in config.methods.iter().enumerate() {
        let per: Vec<&MethodOutcome> = outcomes.iter().map(|o| &o[mi]).collect();
        let ok: Vec<&(bool, Vec<TargetOutcome>)> = per.iter().filter_map(|o| o.fitted.as_ref()).collect();
        let failures = per.len() - ok.len();
        if failures as f64 > MAX_FAILURE_RATE * config.replicates as f64 {
            return Err(EblupError::StudyFailed { failures, replicates: config.replicates });
        }
        let boundary_hits = ok.iter().filter(|(b, _)| *b).count();
        let scores: Vec<&DVector<f64>> = per.iter().map(|o| &o.score).collect();
        methods.push(MethodSummary {
            method,
            failures,
            boundary_hits,
            boundary_rate: boundary_hits as f64 / config.replicates as f64,
            score: score_moments(&prep.truth, method, &scores),
        });
        let info = prep.truth.information(method);
        for (k, (spec, t)) in config.targets.iter().zip(&prep.targets).enumerate() {
            let rows: Vec<&TargetOutcome> = ok.iter().map(|(_, v)| &v[k]).collect();
            summaries.push(summarize_target(&prep.truth, &info, spec.name(), t, &rows, config)?);
        }
    }
    Ok(McReport { replicates: config.replicates, base_seed: config.base_seed, methods, targets: summaries, warnings })
}

fn summarize_target(
    truth: &CovState<'_>,
    info: &crate::likelihood::InformationMatrix,
    name: String,
    target: &PredictionTarget,
    rows: &[&TargetOutcome],
    cfg: &McConfig,
) -> Result<TargetSummary> {
    let method = info.method;
    let g1 = truth.g1(target);
    let g2 = truth.g2(target);
    let g3 = truth.g3_with(target, info)?;
    let g10 = match method {
        Method::Reml => None,
        Method::Ml => Some(truth.g10_with(target, info)?),
    };
    let col = |f: &dyn Fn(&TargetOutcome) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
    let opt_col = |f: &dyn Fn(&TargetOutcome) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(r)).collect() };

    let empirical_mse = Stat::from_values(&col(&|r| r.err_hat2));
    let empirical_mse_known = Stat::from_values(&col(&|r| r.err_true2));
    let diff = Stat::from_values(&col(&|r| r.err_hat2 - r.err_true2));
    let empirical_mse_cv = Stat { mean: diff.mean + g1 + g2, se: diff.se };
    let reference = empirical_mse_cv.mean;

    let estimators = cfg
        .estimators
        .iter()
        .map(|&e| {
            let vals = match e {
                Estimator::Naive => col(&|r| r.naive),
                Estimator::PrasadRao => opt_col(&|r| r.prasad_rao),
                Estimator::SecondOrder => opt_col(&|r| r.second_order),
                Estimator::DataSpecific => opt_col(&|r| r.data_specific),
            };
            let value = Stat::from_values(&vals);
            EstimatorSummary {
                estimator: e,
                count: vals.len(),
                value,
                relative_bias: (reference != 0.0 && !vals.is_empty()).then(|| (value.mean - reference) / reference),
            }
        })
        .collect();
    let g3_vals = opt_col(&|r| r.g3_data);
    Ok(TargetSummary {
        target: name,
        method,
        replicates_used: rows.len(),
        truth: TruthTerms { g1, g2, g3, g10, mse_approx: g1 + g2 + g3 },
        ordering_holds: empirical_mse.mean >= empirical_mse_known.mean - 3.0 * empirical_mse.se,
        empirical_mse,
        empirical_mse_known,
        empirical_mse_cv,
        estimators,
        g3_data: (!g3_vals.is_empty()).then(|| Stat::from_values(&g3_vals)),
    })
}

fn score_moments(truth: &CovState<'_>, method: Method, scores: &[&DVector<f64>]) -> ScoreMoments {
    let s = truth.model().s();
    let mean_target: Vec<f64> = match method {
        Method::Reml => vec![0.0; s],
        Method::Ml => (-truth.ml_score_bias()).iter().copied().collect(),
    };
    let mean: Vec<Stat> =
        (0..s).map(|i| Stat::from_values(&scores.iter().map(|g| g[i]).collect::<Vec<_>>())).collect();
    let half_pvpv = truth.trace_pvpv() * 0.5;
    let mut cov = Vec::with_capacity(s * s);
    let mut cov_target = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let prods: Vec<f64> =
                scores.iter().map(|g| (g[i] - mean_target[i]) * (g[j] - mean_target[j])).collect();
            cov.push(Stat::from_values(&prods));
            cov_target.push(half_pvpv[(i, j)]);
        }
    }
    ScoreMoments {
        method,
        replicates: scores.len(),
        mean_z: mean.iter().zip(&mean_target).map(|(m, &t)| m.z(t)).collect(),
        mean,
        mean_target,
        cov_z: cov.iter().zip(&cov_target).map(|(c, &t)| c.z(t)).collect(),
        cov,
        cov_target,
    }
}

/// Monte Carlo mean and covariance of the REML or ML score at the true
/// `sigma`, with z-statistics against their analytic values.
pub fn score_moment_check(
    model: &MixedModel,
    sigma: &[f64],
    beta: &[f64],
    replicates: usize,
    seed: u64,
    method: Method,
) -> Result<ScoreMoments> {
    let st = CovState::new(model, sigma)?;
    let scores: Vec<DVector<f64>> = (0..replicates)
        .map(|r| simulate_dataset(model, sigma, beta, seed.wrapping_add(r as u64)).map(|y| st.score(&y, method)))
        .collect::<Result<_>>()?;
    let refs: Vec<&DVector<f64>> = scores.iter().collect();
    Ok(score_moments(&st, method, &refs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentEntry {
    /// `"i-1"`, `"i-2"`, `"ii"` or `"iii"`.
    pub identity: String,
    pub row: usize,
    pub col: usize,
    pub estimate: Stat,
    pub target: f64,
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadMomentReport {
    pub replicates: usize,
    pub entries: Vec<MomentEntry>,
    pub max_abs_z: f64,
}

/// Monte Carlo check of the moment identities for `u ~ N(0, Sigma)` and
/// centered quadratic forms `q_j = u'A_j u - tr(A_j Sigma)`:
///
/// * `E[u q_j u'] = 2 Sigma A_j Sigma`
/// * `E[q_1 q_2] = 2 tr(A_1 Sigma A_2 Sigma)`
/// * `E[u q_1 q_2 u'] = 2 tr(A_1 Sigma A_2 Sigma) Sigma + 4 Sigma A_1 Sigma A_2 Sigma + 4 Sigma A_2 Sigma A_1 Sigma`
pub fn quadratic_moment_check(
    sigma: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    replicates: usize,
    seed: u64,
) -> Result<QuadMomentReport> {
    let k = sigma.nrows();
    for (what, m) in [("sigma", sigma), ("A1", a1), ("A2", a2)] {
        if m.nrows() != k || m.ncols() != k {
            return Err(EblupError::DimensionMismatch { what, expected: k, found: m.nrows().max(m.ncols()) });
        }
    }
    if replicates < 2 {
        return Err(EblupError::InvalidConfig("at least 2 replicates required".into()));
    }
    let chol = sigma.clone().cholesky().ok_or(EblupError::NotPositiveDefinite)?;
    let l = chol.l();
    let e1 = (a1 * sigma).trace();
    let e2 = (a2 * sigma).trace();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let u = &l * z;
        let q1 = u.dot(&(a1 * &u)) - e1;
        let q2 = u.dot(&(a2 * &u)) - e2;
        draws.push((u, q1, q2));
    }

    let sas = |a: &DMatrix<f64>| sigma * a * sigma;
    let t12 = crate::linalg::trace_of_product(&(a1 * sigma), &(a2 * sigma));
    let iii = sigma * (2.0 * t12) + (sas(a1) * a2 * sigma) * 4.0 + (sas(a2) * a1 * sigma) * 4.0;

    let mut entries = Vec::new();
    let mut push = |identity: &str, row: usize, col: usize, vals: Vec<f64>, target: f64| {
        let estimate = Stat::from_values(&vals);
        entries.push(MomentEntry { identity: identity.into(), row, col, z: estimate.z(target), estimate, target });
    };
    for (name, which, target) in [("i-1", 1, sas(a1) * 2.0), ("i-2", 2, sas(a2) * 2.0)] {
        for r in 0..k {
            for c in r..k {
                let vals = draws.iter().map(|(u, q1, q2)| u[r] * u[c] * if which == 1 { *q1 } else { *q2 }).collect();
                push(name, r, c, vals, target[(r, c)]);
            }
        }
    }
    push("ii", 0, 0, draws.iter().map(|(_, q1, q2)| q1 * q2).collect(), 2.0 * t12);
    for r in 0..k {
        for c in r..k {
            let vals = draws.iter().map(|(u, q1, q2)| u[r] * u[c] * q1 * q2).collect();
            push("iii", r, c, vals, iii[(r, c)]);
        }
    }
    let max_abs_z = entries
        .iter()
        .map(|e| match e.z {
            Some(z) => z.abs(),
            None if e.estimate.mean == e.target => 0.0,
            None => f64::INFINITY,
        })
        .fold(0.0, f64::max);
    Ok(QuadMomentReport { replicates, entries, max_abs_z })
}
