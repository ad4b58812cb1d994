//! Synthetic benchmark studies: the Kang-Schafer missing-data design and
//! the Lunceford-Davidian treatment-effect design, with a replication
//! harness comparing the implemented estimators.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, StandardUniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators;
use crate::model::{evaluate_moments, EstimatorId, MomentSpec, ObservationalDataset};
use crate::propensity::fit_logistic_mle;
use crate::scalar::Scalar;
use crate::solver;

/// Shorthand for the sampling bounds the generators need.
pub trait SimScalar: Scalar
where
    StandardNormal: Distribution<Self>,
    StandardUniform: Distribution<Self>,
{
}
impl<T> SimScalar for T
where
    T: Scalar,
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
}

/// Association strength levels for the Lunceford-Davidian design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    No,
    Moderate,
    Strong,
}

impl Level {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "no" | "none" => Ok(Level::No),
            "moderate" => Ok(Level::Moderate),
            "strong" => Ok(Level::Strong),
            other => Err(Error::InvalidInput(format!("unknown level '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::No => "no",
            Level::Moderate => "moderate",
            Level::Strong => "strong",
        }
    }
}

/// Whether the treatment model uses all covariates or only the confounders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsScope {
    Full,
    Partial,
}

impl PsScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(PsScope::Full),
            "partial" => Ok(PsScope::Partial),
            other => Err(Error::InvalidInput(format!("unknown scope '{other}'"))),
        }
    }
}

/// One benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Scenario {
    KangSchafer { ps_correct: bool, outcome_correct: bool },
    LuncefordDavidian { beta: Level, xi: Level, scope: PsScope },
}

/// A full study specification: scenario, sample size, replication count,
/// and the master seed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidInput("scenario needs n >= 2".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidInput("scenario needs at least one replication".into()));
        }
        Ok(())
    }

    /// The population value the estimators target.
    pub fn truth<T: Scalar>(&self) -> T {
        match self.scenario {
            Scenario::KangSchafer { .. } => T::of(KS_TRUTH),
            Scenario::LuncefordDavidian { .. } => T::of(LD_TRUTH),
        }
    }
}

/// Population outcome mean in the Kang-Schafer design.
pub const KS_TRUTH: f64 = 210.0;
/// True treatment effect on the treated in the Lunceford-Davidian design.
pub const LD_TRUTH: f64 = 2.0;

/// One draw of the Kang-Schafer design: observed covariates X, the
/// nonlinear transforms Z (standardized per batch), the response indicator,
/// the complete outcome vector, and the true propensities. The outcome is
/// observed only where `treatment` is true.
#[derive(Debug, Clone)]
pub struct KangSchaferSample<T: Scalar> {
    pub x: DMatrix<T>,
    pub z: DMatrix<T>,
    pub treatment: Vec<bool>,
    pub y_full: DVector<T>,
    pub propensity: DVector<T>,
}

impl<T: Scalar> KangSchaferSample<T> {
    /// Dataset with covariates `[X | Z]` and outcomes masked to respondents.
    pub fn dataset(&self) -> Result<ObservationalDataset<T>> {
        let n = self.x.nrows();
        let mut cov = DMatrix::zeros(n, 8);
        cov.view_mut((0, 0), (n, 4)).copy_from(&self.x);
        cov.view_mut((0, 4), (n, 4)).copy_from(&self.z);
        let y = (0..n)
            .map(|i| if self.treatment[i] { Some(self.y_full[i]) } else { None })
            .collect();
        ObservationalDataset::new(cov, self.treatment.clone(), y)
    }

    /// Moment spec selecting the true covariates X.
    pub fn x_features() -> MomentSpec<T> {
        MomentSpec::raw_range(0, 4)
    }

    /// Moment spec selecting the observed transforms Z.
    pub fn z_features() -> MomentSpec<T> {
        MomentSpec::raw_range(4, 8)
    }
}

/// Generate a Kang-Schafer sample from a seed.
pub fn gen_kang_schafer<T: SimScalar>(n: usize, seed: u64) -> KangSchaferSample<T>
where
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
    gen_kang_schafer_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generate a Kang-Schafer sample from an explicit generator.
pub fn gen_kang_schafer_with<T: SimScalar, R: Rng>(n: usize, rng: &mut R) -> KangSchaferSample<T>
where
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
    let x = DMatrix::from_fn(n, 4, |_, _| rng.sample::<T, _>(StandardNormal));
    let mut z = DMatrix::zeros(n, 4);
    let ten = T::of(10.0);
    let twenty = T::of(20.0);
    for i in 0..n {
        let (x1, x2, x3, x4) = (x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]);
        z[(i, 0)] = (x1 / T::of(2.0)).exp();
        z[(i, 1)] = x2 / (T::one() + x1.exp()) + ten;
        let base = x1 * x3 + T::of(0.6);
        z[(i, 2)] = base * base * base;
        let s = x2 + x4 + twenty;
        z[(i, 3)] = s * s;
    }
    standardize_columns(&mut z);

    let mut treatment = Vec::with_capacity(n);
    let mut propensity = DVector::zeros(n);
    let mut y_full = DVector::zeros(n);
    for i in 0..n {
        let (x1, x2, x3, x4) = (x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]);
        let eta = -x1 + T::of(0.5) * x2 - T::of(0.25) * x3 - T::of(0.1) * x4;
        let e = T::one() / (T::one() + (-eta).exp());
        propensity[i] = e;
        treatment.push(rng.random::<T>() < e);
        let eps: T = rng.sample(StandardNormal);
        y_full[i] = T::of(210.0)
            + T::of(27.4) * x1
            + T::of(13.7) * (x2 + x3 + x4)
            + eps;
    }
    KangSchaferSample { x, z, treatment, y_full, propensity }
}

fn standardize_columns<T: Scalar>(m: &mut DMatrix<T>) {
    let means = crate::linalg::column_means(m);
    let sds = crate::linalg::column_sds(m);
    for j in 0..m.ncols() {
        let s = if sds[j] > T::zero() { sds[j] } else { T::one() };
        for i in 0..m.nrows() {
            m[(i, j)] = (m[(i, j)] - means[j]) / s;
        }
    }
}

/// One draw of the Lunceford-Davidian design: confounders X, outcome-only
/// covariates Z, treatment, outcome (always observed), true propensities.
#[derive(Debug, Clone)]
pub struct LuncefordDavidianSample<T: Scalar> {
    pub x: DMatrix<T>,
    pub z: DMatrix<T>,
    pub treatment: Vec<bool>,
    pub y: DVector<T>,
    pub propensity: DVector<T>,
}

impl<T: Scalar> LuncefordDavidianSample<T> {
    /// Dataset with covariates `[X | Z]` (six columns) and full outcomes.
    pub fn dataset(&self) -> Result<ObservationalDataset<T>> {
        let n = self.x.nrows();
        let mut cov = DMatrix::zeros(n, 6);
        cov.view_mut((0, 0), (n, 3)).copy_from(&self.x);
        cov.view_mut((0, 3), (n, 3)).copy_from(&self.z);
        let y = (0..n).map(|i| Some(self.y[i])).collect();
        ObservationalDataset::new(cov, self.treatment.clone(), y)
    }

    /// All six covariates.
    pub fn full_features() -> MomentSpec<T> {
        MomentSpec::raw_range(0, 6)
    }

    /// Only the confounders X.
    pub fn partial_features() -> MomentSpec<T> {
        MomentSpec::raw_range(0, 3)
    }
}

fn ld_beta<T: Scalar>(level: Level) -> [T; 4] {
    match level {
        Level::No => [T::zero(), T::zero(), T::zero(), T::zero()],
        Level::Moderate => [T::zero(), T::of(0.3), T::of(-0.3), T::of(0.3)],
        Level::Strong => [T::zero(), T::of(0.6), T::of(-0.6), T::of(0.6)],
    }
}

fn ld_xi<T: Scalar>(level: Level) -> [T; 3] {
    match level {
        Level::No => [T::zero(), T::zero(), T::zero()],
        Level::Moderate => [T::of(-0.5), T::of(0.5), T::of(0.5)],
        Level::Strong => [T::of(-1.0), T::of(1.0), T::of(1.0)],
    }
}

/// Generate a Lunceford-Davidian sample from a seed.
pub fn gen_lunceford_davidian<T: SimScalar>(
    n: usize,
    beta: Level,
    xi: Level,
    seed: u64,
) -> LuncefordDavidianSample<T>
where
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
    gen_lunceford_davidian_with(n, beta, xi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generate a Lunceford-Davidian sample from an explicit generator.
pub fn gen_lunceford_davidian_with<T: SimScalar, R: Rng>(
    n: usize,
    beta: Level,
    xi: Level,
    rng: &mut R,
) -> LuncefordDavidianSample<T>
where
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
    let b = ld_beta::<T>(beta);
    let k = ld_xi::<T>(xi);
    // Covariance of (X1, Z1, X2, Z2) conditional on X3, shared across arms.
    let cov = DMatrix::from_row_slice(
        4,
        4,
        &[1.0, 0.5, -0.5, -0.5, 0.5, 1.0, -0.5, -0.5, -0.5, -0.5, 1.0, 0.5, -0.5, -0.5, 0.5, 1.0],
    );
    let chol = cov
        .cholesky()
        .expect("the design covariance matrix is positive definite")
        .l()
        .map(|v| T::of(v));

    let mut x = DMatrix::zeros(n, 3);
    let mut z = DMatrix::zeros(n, 3);
    let mut treatment = Vec::with_capacity(n);
    let mut propensity = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let x3 = if rng.random::<T>() < T::of(0.2) { T::one() } else { T::zero() };
        let p_z3 = T::of(0.75) * x3 + T::of(0.25) * (T::one() - x3);
        let z3 = if rng.random::<T>() < p_z3 { T::one() } else { T::zero() };
        let shift = if x3 > T::of(0.5) {
            [T::one(), T::one(), -T::one(), -T::one()]
        } else {
            [-T::one(), -T::one(), T::one(), T::one()]
        };
        let raw = DVector::from_fn(4, |_, _| rng.sample::<T, _>(StandardNormal));
        let correlated = &chol * raw;
        let x1 = correlated[0] + shift[0];
        let z1 = correlated[1] + shift[1];
        let x2 = correlated[2] + shift[2];
        let z2 = correlated[3] + shift[3];
        x[(i, 0)] = x1;
        x[(i, 1)] = x2;
        x[(i, 2)] = x3;
        z[(i, 0)] = z1;
        z[(i, 1)] = z2;
        z[(i, 2)] = z3;

        let eta = b[0] + b[1] * x1 + b[2] * x2 + b[3] * x3;
        let e = T::one() / (T::one() + (-eta).exp());
        propensity[i] = e;
        let t = rng.random::<T>() < e;
        treatment.push(t);

        let t_num = if t { T::one() } else { T::zero() };
        let eps: T = rng.sample(StandardNormal);
        y[i] = -x1 + x2 - x3
            + T::of(LD_TRUTH) * t_num
            + k[0] * z1
            + k[1] * z2
            + k[2] * z3
            + eps;
    }
    LuncefordDavidianSample { x, z, treatment, y, propensity }
}

/// One replication's estimates; failures carry the error message.
#[derive(Debug, Clone)]
pub struct Replication<T: Scalar> {
    pub rep: usize,
    pub estimates: Vec<(EstimatorId, std::result::Result<T, String>)>,
}

/// Mean, bias, spread, and failure accounting for one estimator.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EstimatorSummary {
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub successes: usize,
    pub failures: usize,
}

/// All replication rows plus per-estimator summaries.
#[derive(Debug, Clone)]
pub struct StudyResult<T: Scalar> {
    pub spec: ScenarioSpec,
    pub truth: T,
    pub replications: Vec<Replication<T>>,
    pub summaries: BTreeMap<EstimatorId, EstimatorSummary>,
}

/// Serializable study summary (`schema_version` 1).
#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub truth: f64,
    pub estimators: BTreeMap<String, EstimatorSummary>,
}

impl<T: Scalar> StudyResult<T> {
    /// Summary of one estimator, if it succeeded at least once.
    pub fn summary(&self, id: EstimatorId) -> Option<&EstimatorSummary> {
        self.summaries.get(&id)
    }

    /// The serializable summary object.
    pub fn summary_report(&self) -> StudySummary {
        StudySummary {
            schema_version: 1,
            scenario: self.spec.scenario,
            n: self.spec.n,
            replications: self.spec.replications,
            seed: self.spec.seed,
            truth: self.truth.to_f64_lossy(),
            estimators: self
                .summaries
                .iter()
                .map(|(id, s)| (id.as_str().to_string(), *s))
                .collect(),
        }
    }

    /// One CSV row per replication per estimator:
    /// `rep,estimator,estimate,status`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rep", "estimator", "estimate", "status"])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for rep in &self.replications {
            for (id, outcome) in &rep.estimates {
                let (estimate, status) = match outcome {
                    Ok(v) => (format!("{:.17e}", v.to_f64_lossy()), "ok".to_string()),
                    Err(msg) => (String::new(), msg.clone()),
                };
                w.write_record([rep.rep.to_string(), id.as_str().to_string(), estimate, status])
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(())
    }
}

/// Deterministic per-replication generator: the master seed selects the key,
/// the replication index selects the stream.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

/// Run a replication study. Replications are independent (child generators
/// are derived from the master seed and the replication index) and may be
/// executed in parallel; results are identical either way.
pub fn run_study<T: SimScalar + Send + Sync>(
    spec: &ScenarioSpec,
    estimators: &[EstimatorId],
) -> Result<StudyResult<T>>
where
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
    spec.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidInput("estimator set must be nonempty".into()));
    }
    let replications: Vec<Replication<T>> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| Replication { rep, estimates: run_replication(spec, estimators, rep) })
        .collect();

    let truth: T = spec.truth();
    let mut summaries = BTreeMap::new();
    let mut any_success = false;
    for &id in estimators {
        let values: Vec<f64> = replications
            .iter()
            .flat_map(|r| {
                r.estimates.iter().filter_map(move |(eid, v)| {
                    (*eid == id).then(|| v.as_ref().ok().map(|x| x.to_f64_lossy())).flatten()
                })
            })
            .collect();
        let failures = spec.replications - values.len();
        if values.is_empty() {
            summaries.insert(
                id,
                EstimatorSummary {
                    mean: f64::NAN,
                    bias: f64::NAN,
                    sd: f64::NAN,
                    rmse: f64::NAN,
                    successes: 0,
                    failures,
                },
            );
            continue;
        }
        any_success = true;
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let truth_f = truth.to_f64_lossy();
        let bias = mean - truth_f;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        let rmse =
            (values.iter().map(|v| (v - truth_f) * (v - truth_f)).sum::<f64>() / m).sqrt();
        summaries.insert(id, EstimatorSummary { mean, bias, sd, rmse, successes: values.len(), failures });
    }
    if !any_success {
        return Err(Error::StudyFailed("every replication failed for every estimator".into()));
    }
    Ok(StudyResult { spec: *spec, truth, replications, summaries })
}

fn run_replication<T: SimScalar>(
    spec: &ScenarioSpec,
    estimators: &[EstimatorId],
    rep: usize,
) -> Vec<(EstimatorId, std::result::Result<T, String>)>
where
    StandardNormal: Distribution<T>,
    StandardUniform: Distribution<T>,
{
    let mut rng = replication_rng(spec.seed, rep);
    match spec.scenario {
        Scenario::KangSchafer { ps_correct, outcome_correct } => {
            let sample = gen_kang_schafer_with::<T, _>(spec.n, &mut rng);
            let ps_spec = if ps_correct {
                KangSchaferSample::<T>::x_features()
            } else {
                KangSchaferSample::<T>::z_features()
            };
            let outcome_spec = if outcome_correct {
                KangSchaferSample::<T>::x_features()
            } else {
                KangSchaferSample::<T>::z_features()
            };
            match sample.dataset() {
                Ok(data) => survey_estimates(&data, &ps_spec, &outcome_spec, estimators),
                Err(e) => estimators.iter().map(|&id| (id, Err(e.to_string()))).collect(),
            }
        }
        Scenario::LuncefordDavidian { beta, xi, scope } => {
            let sample = gen_lunceford_davidian_with::<T, _>(spec.n, beta, xi, &mut rng);
            let ps_spec = match scope {
                PsScope::Full => LuncefordDavidianSample::<T>::full_features(),
                PsScope::Partial => LuncefordDavidianSample::<T>::partial_features(),
            };
            let outcome_spec = LuncefordDavidianSample::<T>::full_features();
            match sample.dataset() {
                Ok(data) => patt_estimates(&data, &ps_spec, &outcome_spec, estimators),
                Err(e) => estimators.iter().map(|&id| (id, Err(e.to_string()))).collect(),
            }
        }
    }
}

fn needs_any(set: &[EstimatorId], ids: &[EstimatorId]) -> bool {
    set.iter().any(|id| ids.contains(id))
}

/// Apply the requested estimators in survey (population-mean) mode, sharing
/// the propensity fit, the balance solution, and the outcome fit.
pub fn survey_estimates<T: Scalar>(
    data: &ObservationalDataset<T>,
    ps_spec: &MomentSpec<T>,
    outcome_spec: &MomentSpec<T>,
    set: &[EstimatorId],
) -> Vec<(EstimatorId, std::result::Result<T, String>)> {
    use EstimatorId::*;
    let pfit = if needs_any(set, &[Ipw, Dr]) {
        Some(
            evaluate_moments(data, ps_spec)
                .and_then(|m| fit_logistic_mle(&m, data.treatment(), true)),
        )
    } else {
        None
    };
    let sol = if needs_any(set, &[Eb, EbDr, EbWls]) {
        Some(solver::survey_problem(data, ps_spec, T::zero()).and_then(|p| solver::solve(&p)))
    } else {
        None
    };
    let ofit = if needs_any(set, &[Ols, Dr, EbDr]) {
        Some(estimators::fit_outcome_ols_respondents(data, outcome_spec))
    } else {
        None
    };

    set.iter()
        .map(|&id| {
            let value = match id {
                Ipw => pfit.as_ref().unwrap().clone().and_then(|f| {
                    estimators::estimate_mean_ipw(data, &f).map(|r| r.point)
                }),
                Ols => ofit.as_ref().unwrap().clone().and_then(|f| {
                    estimators::estimate_mean_ols(data, &f).map(|r| r.point)
                }),
                Dr => pfit.as_ref().unwrap().clone().and_then(|pf| {
                    ofit.as_ref().unwrap().clone().and_then(|of| {
                        estimators::estimate_mean_dr(data, &pf, &of).map(|r| r.point)
                    })
                }),
                Eb => sol.as_ref().unwrap().clone().and_then(|s| {
                    estimators::estimate_mean_eb(data, &s).map(|r| r.point)
                }),
                EbDr => sol.as_ref().unwrap().clone().and_then(|s| {
                    ofit.as_ref().unwrap().clone().and_then(|of| {
                        estimators::estimate_mean_eb_dr(data, &s, &of).map(|r| r.point)
                    })
                }),
                EbWls => sol.as_ref().unwrap().clone().and_then(|s| {
                    estimators::estimate_mean_eb_wls(data, &s, outcome_spec).map(|r| r.point)
                }),
            };
            (id, value.map_err(|e| e.to_string()))
        })
        .collect()
}

/// Apply the requested estimators in treatment-effect mode.
pub fn patt_estimates<T: Scalar>(
    data: &ObservationalDataset<T>,
    ps_spec: &MomentSpec<T>,
    outcome_spec: &MomentSpec<T>,
    set: &[EstimatorId],
) -> Vec<(EstimatorId, std::result::Result<T, String>)> {
    use EstimatorId::*;
    let pfit = if needs_any(set, &[Ipw, Dr]) {
        Some(
            evaluate_moments(data, ps_spec)
                .and_then(|m| fit_logistic_mle(&m, data.treatment(), true)),
        )
    } else {
        None
    };
    let sol = if needs_any(set, &[Eb, EbDr, EbWls]) {
        Some(solver::patt_problem(data, ps_spec, T::zero()).and_then(|p| solver::solve(&p)))
    } else {
        None
    };
    let ofit = if needs_any(set, &[Ols, Dr, EbDr]) {
        Some(estimators::fit_outcome_ols(data, outcome_spec))
    } else {
        None
    };

    set.iter()
        .map(|&id| {
            let value = match id {
                Ipw => pfit.as_ref().unwrap().clone().and_then(|f| {
                    estimators::estimate_ipw(data, &f).map(|r| r.point)
                }),
                Ols => ofit.as_ref().unwrap().clone().and_then(|f| {
                    estimators::estimate_ols(data, &f).map(|r| r.point)
                }),
                Dr => pfit.as_ref().unwrap().clone().and_then(|pf| {
                    ofit.as_ref().unwrap().clone().and_then(|of| {
                        estimators::estimate_dr(data, &pf, &of).map(|r| r.point)
                    })
                }),
                Eb => sol.as_ref().unwrap().clone().and_then(|s| {
                    estimators::estimate_eb(data, &s).map(|r| r.point)
                }),
                EbDr => sol.as_ref().unwrap().clone().and_then(|s| {
                    ofit.as_ref().unwrap().clone().and_then(|of| {
                        estimators::estimate_eb_dr(data, &s, &of).map(|r| r.point)
                    })
                }),
                EbWls => sol.as_ref().unwrap().clone().and_then(|s| {
                    estimators::estimate_eb_wls(data, &s, outcome_spec).map(|r| r.point)
                }),
            };
            (id, value.map_err(|e| e.to_string()))
        })
        .collect()
}
