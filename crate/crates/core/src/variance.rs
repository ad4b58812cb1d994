//! Variance estimation: the empirical sandwich from stacked estimating
//! equations, and plug-in closed-form asymptotic variances for the
//! balancing-weight and inverse-probability estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::select_rows;
use crate::model::{evaluate_moments, Estimand, EstimateReport, MomentSpec, ObservationalDataset};
use crate::propensity::PropensityFit;
use crate::scalar::Scalar;
use crate::solver::BalanceSolution;

/// Per-unit estimating equations with their empirical derivative and
/// outer-product matrices.
#[derive(Debug, Clone)]
pub struct EquationStack<T: Scalar> {
    /// n x k matrix of per-unit equation values at the fitted parameters.
    pub zeta: DMatrix<T>,
    /// k x k matrix of minus the averaged parameter derivatives.
    pub a: DMatrix<T>,
    /// k x k averaged outer product of the equations.
    pub b: DMatrix<T>,
}

impl<T: Scalar> EquationStack<T> {
    /// Column means of the per-unit equations; near zero at a fit.
    pub fn residual_means(&self) -> DVector<T> {
        let n = T::of(self.zeta.nrows() as f64);
        DVector::from_iterator(self.zeta.ncols(), self.zeta.column_iter().map(|c| c.sum() / n))
    }
}

/// A sandwich variance with the conditioning of the derivative matrix.
#[derive(Debug, Clone, Copy)]
pub struct SandwichResult<T: Scalar> {
    /// Estimated variance of the point estimate (already divided by n).
    pub variance: T,
    /// Condition number of the derivative matrix A.
    pub condition_number: f64,
}

/// Sandwich variance for a balancing-weight estimate, dispatched on the
/// report's estimand: the treatment-effect stack for PATT reports, the
/// survey stack for population-mean reports.
pub fn sandwich_variance<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    solution: &BalanceSolution<T>,
    report: &EstimateReport<T>,
) -> Result<SandwichResult<T>> {
    match report.estimand {
        Estimand::Patt => eb_sandwich_patt(data, spec, solution),
        Estimand::PopulationMean => eb_sandwich_survey(data, spec, solution),
        Estimand::CounterfactualMean => Err(Error::InvalidInput(
            "sandwich variance is provided for the effect and mean estimands".into(),
        )),
    }
}

/// Sandwich variance of the balancing-weight treatment-effect estimate.
pub fn eb_sandwich_patt<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    solution: &BalanceSolution<T>,
) -> Result<SandwichResult<T>> {
    let stack = eb_stack_patt(data, spec, solution)?;
    sandwich_from_stack(&stack)
}

/// Sandwich variance of the balancing-weight population-mean estimate.
pub fn eb_sandwich_survey<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    solution: &BalanceSolution<T>,
) -> Result<SandwichResult<T>> {
    let stack = eb_stack_survey(data, spec, solution)?;
    sandwich_from_stack(&stack)
}

/// Build the treatment-effect estimating-equation stack at the fitted
/// balancing solution: moment means over the treated, the dual stationarity
/// conditions over the controls, the treated outcome mean, and the effect
/// equation. The tilts are the solution weights rescaled to sum to the
/// number of controls; the sandwich is invariant to that scale.
pub fn eb_stack_patt<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    solution: &BalanceSolution<T>,
) -> Result<EquationStack<T>> {
    if !solution.is_converged() {
        return Err(Error::NotConverged { status: solution.status.to_string() });
    }
    let moments = evaluate_moments(data, spec)?;
    let n = data.n();
    let treatment = data.treatment();
    let controls = data.group_indices(false);
    if controls.len() != solution.weights.len() {
        return Err(Error::InvalidInput("weights are not indexed to the control units".into()));
    }
    let m_hat = crate::model::treated_moment_target(&moments, treatment)?;
    let mu1 = data.group_outcome_mean(true, "sandwich treated mean")?;
    let y0 = data.group_outcomes(false, "sandwich control outcomes")?;
    let mu0: T = solution.weights.dot(&y0);
    let gamma = mu1 - mu0;

    // Per-unit tilts: n0 * w_i on controls, zero elsewhere.
    let n0 = T::of(controls.len() as f64);
    let mut tilt = DVector::zeros(n);
    for (k, &i) in controls.iter().enumerate() {
        tilt[i] = solution.weights[k] * n0;
    }
    let y = full_outcomes(data, "sandwich outcomes")?;

    Ok(patt_stack_from_parts(&moments, treatment, &y, &tilt, m_hat.values(), mu1, gamma))
}

/// Build the survey-mode stack: full-sample moment means, the respondent
/// stationarity conditions, and the weighted-mean equation.
pub fn eb_stack_survey<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    solution: &BalanceSolution<T>,
) -> Result<EquationStack<T>> {
    if !solution.is_converged() {
        return Err(Error::NotConverged { status: solution.status.to_string() });
    }
    let moments = evaluate_moments(data, spec)?;
    let n = data.n();
    let respondents = data.group_indices(true);
    if respondents.len() != solution.weights.len() {
        return Err(Error::InvalidInput("weights are not indexed to the respondent units".into()));
    }
    let m_hat = crate::model::full_sample_target(&moments);
    let y1 = data.group_outcomes(true, "sandwich respondent outcomes")?;
    let mu: T = solution.weights.dot(&y1);

    let n1 = T::of(respondents.len() as f64);
    let mut tilt = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    for (k, &i) in respondents.iter().enumerate() {
        tilt[i] = solution.weights[k] * n1;
        y[i] = y1[k];
    }

    let p = moments.ncols();
    let k_dim = 2 * p + 1;
    let mut zeta = DMatrix::zeros(n, k_dim);
    let mut a = DMatrix::zeros(k_dim, k_dim);
    let n_t = T::of(n as f64);
    for i in 0..n {
        let ti = data.treatment()[i];
        let li = tilt[i];
        for j in 0..p {
            let centered = moments[(i, j)] - m_hat.values()[j];
            zeta[(i, j)] = centered;
            a[(j, j)] += T::one() / n_t;
            if ti {
                zeta[(i, p + j)] = li * centered;
                a[(p + j, j)] += li / n_t;
                for k2 in 0..p {
                    a[(p + j, p + k2)] -= li * centered * moments[(i, k2)] / n_t;
                }
            }
        }
        if ti {
            let resid = y[i] - mu;
            zeta[(i, 2 * p)] = li * resid;
            for k2 in 0..p {
                a[(2 * p, p + k2)] -= li * resid * moments[(i, k2)] / n_t;
            }
            a[(2 * p, 2 * p)] += li / n_t;
        }
    }
    let b = zeta.transpose() * &zeta / n_t;
    Ok(EquationStack { zeta, a, b })
}

fn patt_stack_from_parts<T: Scalar>(
    moments: &DMatrix<T>,
    treatment: &[bool],
    y: &DVector<T>,
    tilt: &DVector<T>,
    m_hat: &DVector<T>,
    mu1: T,
    gamma: T,
) -> EquationStack<T> {
    let n = moments.nrows();
    let p = moments.ncols();
    let k_dim = 2 * p + 2;
    let n_t = T::of(n as f64);
    let mut zeta = DMatrix::zeros(n, k_dim);
    let mut a = DMatrix::zeros(k_dim, k_dim);
    for i in 0..n {
        let ti = treatment[i];
        let li = tilt[i];
        for j in 0..p {
            let centered = moments[(i, j)] - m_hat[j];
            if ti {
                zeta[(i, j)] = centered;
                a[(j, j)] += T::one() / n_t;
            } else {
                zeta[(i, p + j)] = li * centered;
                a[(p + j, j)] += li / n_t;
                for k2 in 0..p {
                    a[(p + j, p + k2)] -= li * centered * moments[(i, k2)] / n_t;
                }
            }
        }
        if ti {
            zeta[(i, 2 * p)] = y[i] - mu1;
            a[(2 * p, 2 * p)] += T::one() / n_t;
        } else {
            let resid = y[i] + gamma - mu1;
            zeta[(i, 2 * p + 1)] = li * resid;
            for k2 in 0..p {
                a[(2 * p + 1, p + k2)] -= li * resid * moments[(i, k2)] / n_t;
            }
            a[(2 * p + 1, 2 * p)] += li / n_t;
            a[(2 * p + 1, 2 * p + 1)] -= li / n_t;
        }
    }
    let b = zeta.transpose() * &zeta / n_t;
    EquationStack { zeta, a, b }
}

fn full_outcomes<T: Scalar>(data: &ObservationalDataset<T>, context: &str) -> Result<DVector<T>> {
    let mut y = DVector::zeros(data.n());
    for i in 0..data.n() {
        y[i] = data.outcome()[i]
            .ok_or(Error::MissingOutcome { unit: i, context: context.to_string() })?;
    }
    Ok(y)
}

/// Bottom-right entry of `A^-1 B A^-T / n`, with the condition number of A.
fn sandwich_from_stack<T: Scalar>(stack: &EquationStack<T>) -> Result<SandwichResult<T>> {
    let k = stack.a.nrows();
    let n = stack.zeta.nrows();
    let singular = Error::SingularMatrix { context: "sandwich derivative matrix".into() };
    let a_inv = stack.a.clone().lu().try_inverse().ok_or(singular)?;
    let v = &a_inv * &stack.b * a_inv.transpose();
    let variance = v[(k - 1, k - 1)] / T::of(n as f64);
    let svals = stack.a.clone().svd(false, false).singular_values;
    let smax = svals.iter().copied().fold(T::zero(), |acc, s| acc.max(s));
    let smin = svals.iter().copied().fold(smax, |acc, s| acc.min(s));
    let condition_number = if smin > T::zero() {
        (smax / smin).to_f64_lossy()
    } else {
        f64::INFINITY
    };
    if variance < T::zero() {
        return Err(Error::InvalidInput("sandwich variance came out negative".into()));
    }
    Ok(SandwichResult { variance, condition_number })
}

/// Generic sandwich for the inverse-probability treatment-effect estimator:
/// logistic score equations plus the mean and effect equations.
pub fn ipw_sandwich_patt<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    fit: &PropensityFit<T>,
) -> Result<SandwichResult<T>> {
    if !fit.converged {
        return Err(Error::NotConverged { status: "logistic fit did not converge".into() });
    }
    let moments = evaluate_moments(data, spec)?;
    let design = with_intercept(&moments, fit.intercept);
    let n = data.n();
    let q = design.ncols();
    let treatment = data.treatment();
    let y = full_outcomes(data, "ipw sandwich outcomes")?;
    let mu1 = data.group_outcome_mean(true, "ipw sandwich treated mean")?;
    let w = crate::propensity::ipw_att_weights(fit, treatment)?;
    let y0 = data.group_outcomes(false, "ipw sandwich control outcomes")?;
    let mu0: T = w.dot(&y0);
    let gamma = mu1 - mu0;

    let k_dim = q + 2;
    let n_t = T::of(n as f64);
    let bound = T::one() - T::of(1e-12);
    let mut zeta = DMatrix::zeros(n, k_dim);
    let mut a = DMatrix::zeros(k_dim, k_dim);
    for i in 0..n {
        let e = fit.fitted[i];
        let ti = treatment[i];
        let t_num = if ti { T::one() } else { T::zero() };
        for j in 0..q {
            zeta[(i, j)] = (t_num - e) * design[(i, j)];
            for k2 in 0..q {
                a[(j, k2)] += e * (T::one() - e) * design[(i, j)] * design[(i, k2)] / n_t;
            }
        }
        if ti {
            zeta[(i, q)] = y[i] - mu1;
            a[(q, q)] += T::one() / n_t;
        } else {
            if e >= bound {
                return Err(Error::OverlapViolation { unit: i, value: e.to_f64_lossy() });
            }
            let l = e / (T::one() - e);
            let resid = y[i] + gamma - mu1;
            zeta[(i, q + 1)] = l * resid;
            for k2 in 0..q {
                a[(q + 1, k2)] -= l * resid * design[(i, k2)] / n_t;
            }
            a[(q + 1, q)] += l / n_t;
            a[(q + 1, q + 1)] -= l / n_t;
        }
    }
    let b = zeta.transpose() * &zeta / n_t;
    sandwich_from_stack(&EquationStack { zeta, a, b })
}

/// Generic sandwich for the survey-mode inverse-probability mean.
pub fn ipw_sandwich_survey<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    fit: &PropensityFit<T>,
) -> Result<SandwichResult<T>> {
    if !fit.converged {
        return Err(Error::NotConverged { status: "logistic fit did not converge".into() });
    }
    let moments = evaluate_moments(data, spec)?;
    let design = with_intercept(&moments, fit.intercept);
    let n = data.n();
    let q = design.ncols();
    let treatment = data.treatment();
    let w = crate::propensity::ipw_mean_weights(fit, treatment)?;
    let y1 = data.group_outcomes(true, "ipw survey outcomes")?;
    let mu: T = w.dot(&y1);

    let k_dim = q + 1;
    let n_t = T::of(n as f64);
    let mut zeta = DMatrix::zeros(n, k_dim);
    let mut a = DMatrix::zeros(k_dim, k_dim);
    let mut respondent_idx = 0usize;
    for i in 0..n {
        let e = fit.fitted[i];
        let ti = treatment[i];
        let t_num = if ti { T::one() } else { T::zero() };
        for j in 0..q {
            zeta[(i, j)] = (t_num - e) * design[(i, j)];
            for k2 in 0..q {
                a[(j, k2)] += e * (T::one() - e) * design[(i, j)] * design[(i, k2)] / n_t;
            }
        }
        if ti {
            let resid = y1[respondent_idx] - mu;
            respondent_idx += 1;
            let inv_e = T::one() / e;
            zeta[(i, q)] = inv_e * resid;
            for k2 in 0..q {
                a[(q, k2)] += inv_e * (T::one() - e) * resid * design[(i, k2)] / n_t;
            }
            a[(q, q)] += inv_e / n_t;
        }
    }
    let b = zeta.transpose() * &zeta / n_t;
    sandwich_from_stack(&EquationStack { zeta, a, b })
}

fn with_intercept<T: Scalar>(moments: &DMatrix<T>, intercept: bool) -> DMatrix<T> {
    if !intercept {
        return moments.clone();
    }
    let n = moments.nrows();
    let mut design = DMatrix::from_element(n, moments.ncols() + 1, T::one());
    design.view_mut((0, 1), (n, moments.ncols())).copy_from(moments);
    design
}

/// Treated-group-conditional covariance blocks weighted by 1, by the odds
/// `e/(1-e)`, and by `1-e`, estimated through the change-of-measure
/// identity: expectations given treatment are propensity-weighted averages
/// over the units that carry the relevant outcome.
#[derive(Debug, Clone)]
pub struct MomentCovariances<T: Scalar> {
    pub h_c: DMatrix<T>,
    pub h_c0: DVector<T>,
    pub h_c1: DVector<T>,
    pub h_1: T,
    pub g_c: DMatrix<T>,
    pub g_c0: DVector<T>,
    pub g_0: T,
    pub k_c: DMatrix<T>,
    pub km_c0: DVector<T>,
    pub km_c1: DVector<T>,
    pub pi: T,
}

/// Estimate the covariance blocks from data and propensity values.
///
/// Moment-only blocks average over all units with weight `e`; blocks
/// involving the unexposed outcome average over controls with weight
/// `e/(1-e)`; blocks involving the exposed outcome average over treated
/// units. `pi` is the sample treated fraction.
pub fn plugin_moment_covariances<T: Scalar>(
    data: &ObservationalDataset<T>,
    propensity: &DVector<T>,
    spec: &MomentSpec<T>,
) -> Result<MomentCovariances<T>> {
    let n = data.n();
    if propensity.len() != n {
        return Err(Error::InvalidInput("one propensity value per unit required".into()));
    }
    let bound = T::one() - T::of(1e-12);
    for i in 0..n {
        let e = propensity[i];
        if !(e > T::zero() && e < T::one()) {
            return Err(Error::OverlapViolation { unit: i, value: e.to_f64_lossy() });
        }
        if !data.treatment()[i] && e >= bound {
            return Err(Error::OverlapViolation { unit: i, value: e.to_f64_lossy() });
        }
    }
    let moments = evaluate_moments(data, spec)?;
    let p = moments.ncols();
    let treatment = data.treatment();
    let odds = DVector::from_iterator(
        n,
        (0..n).map(|i| propensity[i] / (T::one() - propensity[i])),
    );

    // Moment-only blocks: all units, conditioning weight e.
    let e_w = propensity.clone();
    let c_mean = weighted_col_means(&moments, &e_w);
    let h_c = weighted_cov_matrix(&moments, &e_w, &c_mean, None);
    let g_c = weighted_cov_matrix(&moments, &e_w, &c_mean, Some(&odds));
    let k_c = {
        let extra = DVector::from_iterator(n, (0..n).map(|i| T::one() - propensity[i]));
        weighted_raw_matrix(&moments, &e_w, Some(&extra))
    };

    // Blocks with the unexposed outcome: controls, conditioning weight odds.
    let controls: Vec<bool> = treatment.iter().map(|&t| !t).collect();
    let y0 = data.group_outcomes(false, "plugin covariances")?;
    let c0 = select_rows(&moments, &controls);
    let odds0 = pick(&odds, &controls);
    let e0 = pick(propensity, &controls);
    let c0_mean = weighted_col_means(&c0, &odds0);
    let y0_mean = weighted_mean(&y0, &odds0);
    let h_c0 = weighted_cov_vector(&c0, &y0, &odds0, &c0_mean, y0_mean, None);
    let g_c0 = weighted_cov_vector(&c0, &y0, &odds0, &c0_mean, y0_mean, Some(&odds0));
    let g_0 = weighted_scalar_cov(&y0, &odds0, y0_mean, Some(&odds0));
    let km_c0 = {
        let extra = DVector::from_iterator(y0.len(), e0.iter().map(|&e| T::one() - e));
        weighted_halfcentered_vector(&c0, &y0, &odds0, y0_mean, Some(&extra))
    };

    // Blocks with the exposed outcome: treated units, weight 1.
    let treated_mask: Vec<bool> = treatment.to_vec();
    let y1 = data.group_outcomes(true, "plugin covariances")?;
    let c1 = select_rows(&moments, &treated_mask);
    let e1 = pick(propensity, &treated_mask);
    let ones = DVector::from_element(y1.len(), T::one());
    let c1_mean = weighted_col_means(&c1, &ones);
    let y1_mean = weighted_mean(&y1, &ones);
    let h_c1 = weighted_cov_vector(&c1, &y1, &ones, &c1_mean, y1_mean, None);
    let h_1 = weighted_scalar_cov(&y1, &ones, y1_mean, None);
    let km_c1 = {
        let extra = DVector::from_iterator(y1.len(), e1.iter().map(|&e| T::one() - e));
        weighted_halfcentered_vector(&c1, &y1, &ones, y1_mean, Some(&extra))
    };

    let n1 = treatment.iter().filter(|&&t| t).count();
    let pi = T::of(n1 as f64) / T::of(n as f64);
    let _ = p;
    Ok(MomentCovariances { h_c, h_c0, h_c1, h_1, g_c, g_c0, g_0, k_c, km_c0, km_c1, pi })
}

fn pick<T: Scalar>(v: &DVector<T>, mask: &[bool]) -> DVector<T> {
    DVector::from_iterator(
        mask.iter().filter(|&&b| b).count(),
        v.iter().zip(mask.iter()).filter_map(|(&x, &b)| b.then_some(x)),
    )
}

fn weighted_col_means<T: Scalar>(m: &DMatrix<T>, w: &DVector<T>) -> DVector<T> {
    let total: T = w.iter().copied().sum();
    let mut out = DVector::zeros(m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[j] += w[i] * m[(i, j)];
        }
    }
    out / total
}

fn weighted_mean<T: Scalar>(v: &DVector<T>, w: &DVector<T>) -> T {
    let total: T = w.iter().copied().sum();
    w.dot(v) / total
}

/// `sum_i w_i extra_i (m_i - mean)(m_i - mean)^T / sum_i w_i`.
fn weighted_cov_matrix<T: Scalar>(
    m: &DMatrix<T>,
    w: &DVector<T>,
    mean: &DVector<T>,
    extra: Option<&DVector<T>>,
) -> DMatrix<T> {
    let p = m.ncols();
    let total: T = w.iter().copied().sum();
    let mut out = DMatrix::zeros(p, p);
    for i in 0..m.nrows() {
        let wi = w[i] * extra.map_or(T::one(), |x| x[i]);
        for r in 0..p {
            let dr = m[(i, r)] - mean[r];
            for s in r..p {
                out[(r, s)] += wi * dr * (m[(i, s)] - mean[s]);
            }
        }
    }
    for r in 0..p {
        for s in (r + 1)..p {
            out[(s, r)] = out[(r, s)];
        }
    }
    out / total
}

/// `sum_i w_i extra_i (m_i - mean)(y_i - y_mean) / sum_i w_i`.
fn weighted_cov_vector<T: Scalar>(
    m: &DMatrix<T>,
    y: &DVector<T>,
    w: &DVector<T>,
    mean: &DVector<T>,
    y_mean: T,
    extra: Option<&DVector<T>>,
) -> DVector<T> {
    let p = m.ncols();
    let total: T = w.iter().copied().sum();
    let mut out = DVector::zeros(p);
    for i in 0..m.nrows() {
        let wi = w[i] * extra.map_or(T::one(), |x| x[i]);
        let dy = y[i] - y_mean;
        for r in 0..p {
            out[r] += wi * (m[(i, r)] - mean[r]) * dy;
        }
    }
    out / total
}

fn weighted_scalar_cov<T: Scalar>(
    y: &DVector<T>,
    w: &DVector<T>,
    y_mean: T,
    extra: Option<&DVector<T>>,
) -> T {
    let total: T = w.iter().copied().sum();
    let mut out = T::zero();
    for i in 0..y.len() {
        let wi = w[i] * extra.map_or(T::one(), |x| x[i]);
        let dy = y[i] - y_mean;
        out += wi * dy * dy;
    }
    out / total
}

/// `sum_i w_i extra_i m_i (y_i - y_mean) / sum_i w_i` (first argument raw).
fn weighted_halfcentered_vector<T: Scalar>(
    m: &DMatrix<T>,
    y: &DVector<T>,
    w: &DVector<T>,
    y_mean: T,
    extra: Option<&DVector<T>>,
) -> DVector<T> {
    let p = m.ncols();
    let total: T = w.iter().copied().sum();
    let mut out = DVector::zeros(p);
    for i in 0..m.nrows() {
        let wi = w[i] * extra.map_or(T::one(), |x| x[i]);
        let dy = y[i] - y_mean;
        for r in 0..p {
            out[r] += wi * m[(i, r)] * dy;
        }
    }
    out / total
}

/// `sum_i w_i extra_i m_i m_i^T / sum_i w_i` (both arguments raw).
fn weighted_raw_matrix<T: Scalar>(
    m: &DMatrix<T>,
    w: &DVector<T>,
    extra: Option<&DVector<T>>,
) -> DMatrix<T> {
    let p = m.ncols();
    let total: T = w.iter().copied().sum();
    let mut out = DMatrix::zeros(p, p);
    for i in 0..m.nrows() {
        let wi = w[i] * extra.map_or(T::one(), |x| x[i]);
        for r in 0..p {
            for s in r..p {
                out[(r, s)] += wi * m[(i, r)] * m[(i, s)];
            }
        }
    }
    for r in 0..p {
        for s in (r + 1)..p {
            out[(s, r)] = out[(r, s)];
        }
    }
    out / total
}

/// Closed-form asymptotic variance of the balancing-weight estimator under a
/// correct logistic treatment model.
pub fn v_eb<T: Scalar>(cov: &MomentCovariances<T>) -> Result<T> {
    let h_inv_hc0 = solve_block(&cov.h_c, &cov.h_c0, "H_c")?;
    // 2 G_c0 - H_c0 - G_c H_c^-1 H_c0 + 2 H_c1
    let mut inner = &cov.g_c0 * T::of(2.0);
    inner -= &cov.h_c0;
    inner -= &cov.g_c * &h_inv_hc0;
    inner += &cov.h_c1 * T::of(2.0);
    let correction = h_inv_hc0.dot(&inner);
    Ok((cov.h_1 + cov.g_0 - correction) / cov.pi)
}

/// Closed-form asymptotic variance of the inverse-probability estimator.
/// Exposed for cross-checking; the sandwich version is the reference.
pub fn v_ipw<T: Scalar>(cov: &MomentCovariances<T>) -> Result<T> {
    let k_inv_hc0 = solve_block(&cov.k_c, &cov.h_c0, "K_c")?;
    let mut inner = cov.h_c0.clone();
    inner -= &cov.km_c0 * T::of(2.0);
    inner += &cov.km_c1 * T::of(2.0);
    let correction = k_inv_hc0.dot(&inner);
    Ok((cov.h_1 + cov.g_0 - correction) / cov.pi)
}

/// Semiparametric variance bound evaluated with the linear outcome
/// regressions implied by the blocks: `beta_t = H_c^-1 H_{c,t}`. Exact when
/// the conditional outcome means are linear in the moments.
pub fn v_bound<T: Scalar>(cov: &MomentCovariances<T>) -> Result<T> {
    let beta0 = solve_block(&cov.h_c, &cov.h_c0, "H_c")?;
    let beta1 = solve_block(&cov.h_c, &cov.h_c1, "H_c")?;
    let h_g0g1 = beta0.dot(&(&cov.h_c * &beta1));
    let g_g0 = beta0.dot(&(&cov.g_c * &beta0));
    let h_g0 = beta0.dot(&(&cov.h_c * &beta0));
    Ok((cov.h_1 + cov.g_0 - T::of(2.0) * h_g0g1 - g_g0 + h_g0) / cov.pi)
}

fn solve_block<T: Scalar>(m: &DMatrix<T>, rhs: &DVector<T>, name: &str) -> Result<DVector<T>> {
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::SingularMatrix { context: format!("{name} block") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MomentSpec, ObservationalDataset};
    use crate::solver::{patt_problem, solve, SolverSettings};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn expit(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Dataset with a logit-linear treatment and linear outcomes, plus the
    /// true propensity values. Mild logit slopes keep the odds weights
    /// light-tailed so plug-in blocks converge at moderate n.
    fn linear_dgp(
        rng: &mut ChaCha8Rng,
        n: usize,
        noise: f64,
    ) -> (ObservationalDataset<f64>, DVector<f64>) {
        loop {
            let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = DVector::from_fn(n, |i, _| expit(0.2 + 0.4 * x[(i, 0)] - 0.3 * x[(i, 1)]));
            let t: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < e[i]).collect();
            let n1 = t.iter().filter(|&&b| b).count();
            if n1 < 5 || n - n1 < 5 {
                continue;
            }
            let y: Vec<Option<f64>> = (0..n)
                .map(|i| {
                    let g0 = 1.0 + 1.0 * x[(i, 0)] + 0.5 * x[(i, 1)];
                    let g1 = 3.0 + 0.8 * x[(i, 0)] - 0.2 * x[(i, 1)];
                    let eps = noise * rng.sample::<f64, _>(StandardNormal);
                    Some(if t[i] { g1 + eps } else { g0 + eps })
                })
                .collect();
            let data = ObservationalDataset::new(x, t, y).unwrap();
            return (data, e);
        }
    }

    fn solved(data: &ObservationalDataset<f64>, spec: &MomentSpec<f64>) -> crate::solver::BalanceSolution<f64> {
        solved_tol(data, spec, 1e-11)
    }

    fn solved_tol(
        data: &ObservationalDataset<f64>,
        spec: &MomentSpec<f64>,
        tol: f64,
    ) -> crate::solver::BalanceSolution<f64> {
        let mut settings = SolverSettings::default();
        settings.grad_tol = tol;
        let problem = patt_problem(data, spec, 0.0).unwrap().with_settings(settings);
        let sol = solve(&problem).unwrap();
        assert!(sol.is_converged());
        sol
    }

    #[test]
    fn zeta_column_means_vanish_at_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (data, _) = linear_dgp(&mut rng, 300, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let sol = solved(&data, &spec);
        let stack = eb_stack_patt(&data, &spec, &sol).unwrap();
        assert!(stack.residual_means().amax() < 1e-6);
    }

    #[test]
    fn survey_zeta_column_means_vanish_at_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (data, _) = linear_dgp(&mut rng, 300, 1.0);
        // Survey reading: outcomes only needed on respondents.
        let spec = MomentSpec::raw_range(0, 2);
        let mut settings = SolverSettings::default();
        settings.grad_tol = 1e-11;
        let problem =
            crate::solver::survey_problem(&data, &spec, 0.0).unwrap().with_settings(settings);
        let sol = solve(&problem).unwrap();
        assert!(sol.is_converged());
        let stack = eb_stack_survey(&data, &spec, &sol).unwrap();
        assert!(stack.residual_means().amax() < 1e-6);
    }

    #[test]
    fn duplicating_the_dataset_halves_the_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (data, _) = linear_dgp(&mut rng, 120, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let sol = solved(&data, &spec);
        let v1 = eb_sandwich_patt(&data, &spec, &sol).unwrap().variance;

        // Duplicate every unit.
        let n = data.n();
        let mut x2 = DMatrix::zeros(2 * n, 2);
        x2.view_mut((0, 0), (n, 2)).copy_from(data.covariates());
        x2.view_mut((n, 0), (n, 2)).copy_from(data.covariates());
        let mut t2 = data.treatment().to_vec();
        t2.extend_from_slice(data.treatment());
        let mut y2 = data.outcome().to_vec();
        y2.extend_from_slice(data.outcome());
        let data2 = ObservationalDataset::new(x2, t2, y2).unwrap();
        let sol2 = solved(&data2, &spec);
        let v2 = eb_sandwich_patt(&data2, &spec, &sol2).unwrap().variance;
        assert!(((v2 - v1 / 2.0) / (v1 / 2.0)).abs() < 1e-8, "v1={v1}, v2={v2}");
    }

    #[test]
    fn analytic_a_matrix_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (data, _) = linear_dgp(&mut rng, 150, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let sol = solved(&data, &spec);
        let stack = eb_stack_patt(&data, &spec, &sol).unwrap();

        // Rebuild the stack at perturbed parameters, holding the tilt scale
        // fixed, and compare the finite-difference Jacobian of the column
        // means with -A.
        let moments = evaluate_moments(&data, &spec).unwrap();
        let treatment = data.treatment().to_vec();
        let y = full_outcomes(&data, "fd test").unwrap();
        let controls = data.group_indices(false);
        let n0 = controls.len() as f64;
        let mut tilt0 = DVector::zeros(data.n());
        for (k, &i) in controls.iter().enumerate() {
            tilt0[i] = sol.weights[k] * n0;
        }
        let m_hat = crate::model::treated_moment_target(&moments, &treatment).unwrap();
        let mu1 = data.group_outcome_mean(true, "fd").unwrap();
        let y0 = data.group_outcomes(false, "fd").unwrap();
        let gamma = mu1 - sol.weights.dot(&y0);
        let p = 2;

        // kappa_i = tilt_i / exp(theta . c_i), constant across controls.
        let theta = &sol.theta;
        let kappa = {
            let i = controls[0];
            let dot = theta[0] * moments[(i, 0)] + theta[1] * moments[(i, 1)];
            tilt0[i] / dot.exp()
        };
        let means_at = |m: &DVector<f64>, th: &DVector<f64>, mu: f64, g: f64| -> DVector<f64> {
            let mut tilt = DVector::zeros(data.n());
            for &i in &controls {
                let dot = th[0] * moments[(i, 0)] + th[1] * moments[(i, 1)];
                tilt[i] = kappa * dot.exp();
            }
            let stack = patt_stack_from_parts(&moments, &treatment, &y, &tilt, m, mu, g);
            stack.residual_means()
        };

        let h = 1e-6;
        let k_dim = 2 * p + 2;
        let mut fd = DMatrix::<f64>::zeros(k_dim, k_dim);
        let base_m = m_hat.values().clone();
        for col in 0..k_dim {
            let mut mp = base_m.clone();
            let mut mm = base_m.clone();
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            let mut mup = mu1;
            let mut mum = mu1;
            let mut gp = gamma;
            let mut gm = gamma;
            match col {
                0 | 1 => {
                    mp[col] += h;
                    mm[col] -= h;
                }
                2 | 3 => {
                    tp[col - 2] += h;
                    tm[col - 2] -= h;
                }
                4 => {
                    mup += h;
                    mum -= h;
                }
                _ => {
                    gp += h;
                    gm -= h;
                }
            }
            let up = means_at(&mp, &tp, mup, gp);
            let um = means_at(&mm, &tm, mum, gm);
            for row in 0..k_dim {
                fd[(row, col)] = (up[row] - um[row]) / (2.0 * h);
            }
        }
        for r in 0..k_dim {
            for c in 0..k_dim {
                let expected = -stack.a[(r, c)];
                assert!(
                    (fd[(r, c)] - expected).abs() < 1e-5 * (1.0 + expected.abs()),
                    "A[{r},{c}]: fd {} vs analytic {}",
                    fd[(r, c)],
                    expected
                );
            }
        }
    }

    #[test]
    fn a_matrix_blocks_match_closed_form_at_plugins() {
        // The derivative matrix has the block form
        //   [ pi I, 0, 0, 0; L I, -L Cov(c|T=1), 0, 0;
        //     0, 0, pi, 0; 0, -L Cov(Y(0),c|T=1), L, -L ]
        // where the conditional covariances are the change-of-measure
        // plug-ins under the fitted tilts and L is the tilt-row scale.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (data, _) = linear_dgp(&mut rng, 400, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let sol = solved(&data, &spec);
        let stack = eb_stack_patt(&data, &spec, &sol).unwrap();
        let p = 2;
        let n = data.n() as f64;
        let controls = data.group_indices(false);
        let pi_hat = data.n_treated() as f64 / n;
        let l_bar = controls.len() as f64 / n;

        let moments = evaluate_moments(&data, &spec).unwrap();
        let m_hat = crate::model::treated_moment_target(&moments, data.treatment()).unwrap();
        let y0 = data.group_outcomes(false, "plugin").unwrap();
        let mu0 = sol.weights.dot(&y0);
        // Change-of-measure plug-ins with the normalized weights.
        let mut cov_c = DMatrix::<f64>::zeros(p, p);
        let mut cov_y0c = DVector::<f64>::zeros(p);
        for (k, &i) in controls.iter().enumerate() {
            let w = sol.weights[k];
            let d = DVector::from_fn(p, |j, _| moments[(i, j)] - m_hat.values()[j]);
            cov_c += &d * d.transpose() * w;
            cov_y0c += d * (w * (y0[k] - mu0));
        }
        for r in 0..p {
            assert_abs_diff_eq!(stack.a[(r, r)], pi_hat, epsilon = 1e-10);
            assert_abs_diff_eq!(stack.a[(p + r, r)], l_bar, epsilon = 1e-10);
            for c in 0..p {
                assert_abs_diff_eq!(
                    stack.a[(p + r, p + c)],
                    -l_bar * cov_c[(r, c)],
                    epsilon = 1e-6
                );
            }
        }
        assert_abs_diff_eq!(stack.a[(2 * p, 2 * p)], pi_hat, epsilon = 1e-10);
        for c in 0..p {
            assert_abs_diff_eq!(
                stack.a[(2 * p + 1, p + c)],
                -l_bar * cov_y0c[c],
                epsilon = 1e-6
            );
        }
        assert_abs_diff_eq!(stack.a[(2 * p + 1, 2 * p)], l_bar, epsilon = 1e-10);
        assert_abs_diff_eq!(stack.a[(2 * p + 1, 2 * p + 1)], -l_bar, epsilon = 1e-10);
    }

    #[test]
    fn constant_propensity_collapses_g_to_scaled_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pi = 0.4;
        let t: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < pi).collect();
        let y: Vec<Option<f64>> =
            (0..n).map(|i| Some(x[(i, 0)] + rng.sample::<f64, _>(StandardNormal))).collect();
        let data = ObservationalDataset::new(x, t, y).unwrap();
        let spec = MomentSpec::raw_range(0, 2);
        let e = DVector::from_element(n, pi);
        let cov = plugin_moment_covariances(&data, &e, &spec).unwrap();
        let factor = pi / (1.0 - pi);
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(cov.g_c[(r, c)], factor * cov.h_c[(r, c)], epsilon = 1e-10);
            }
            assert_abs_diff_eq!(cov.g_c0[r], factor * cov.h_c0[r], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(cov.g_0, factor * weighted_g0_reference(&data, factor), epsilon = 1e-9);

        // K_c = (1 - pi) * E[c c^T | T=1] under the same plug-in measure.
        let moments = evaluate_moments(&data, &spec).unwrap();
        let raw = weighted_raw_matrix(&moments, &e, None);
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(cov.k_c[(r, c)], (1.0 - pi) * raw[(r, c)], epsilon = 1e-10);
            }
        }
    }

    fn weighted_g0_reference(data: &ObservationalDataset<f64>, _factor: f64) -> f64 {
        // With constant weights the G_0 block is the plain control-outcome
        // variance (n denominator).
        let y0 = data.group_outcomes(false, "ref").unwrap();
        let mean = y0.sum() / y0.len() as f64;
        y0.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / y0.len() as f64
    }

    #[test]
    fn h_c_matches_independent_weighted_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (data, e) = linear_dgp(&mut rng, 150, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let cov = plugin_moment_covariances(&data, &e, &spec).unwrap();
        // Straight-loop oracle over all units with weight e.
        let m = evaluate_moments(&data, &spec).unwrap();
        let total: f64 = e.iter().sum();
        let mut mean = [0.0f64; 2];
        for i in 0..data.n() {
            for j in 0..2 {
                mean[j] += e[i] * m[(i, j)];
            }
        }
        mean.iter_mut().for_each(|v| *v /= total);
        let mut h = [[0.0f64; 2]; 2];
        for i in 0..data.n() {
            for r in 0..2 {
                for c in 0..2 {
                    h[r][c] += e[i] * (m[(i, r)] - mean[r]) * (m[(i, c)] - mean[c]);
                }
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(cov.h_c[(r, c)], h[r][c] / total, epsilon = 1e-12);
            }
        }
    }

    fn scalar_cov(h_c: f64, h_c0: f64, h_c1: f64, h_1: f64, g_c: f64, g_c0: f64, g_0: f64, pi: f64) -> MomentCovariances<f64> {
        MomentCovariances {
            h_c: DMatrix::from_element(1, 1, h_c),
            h_c0: DVector::from_element(1, h_c0),
            h_c1: DVector::from_element(1, h_c1),
            h_1,
            g_c: DMatrix::from_element(1, 1, g_c),
            g_c0: DVector::from_element(1, g_c0),
            g_0,
            k_c: DMatrix::from_element(1, 1, 1.0),
            km_c0: DVector::from_element(1, 0.0),
            km_c1: DVector::from_element(1, 0.0),
            pi,
        }
    }

    #[test]
    fn v_eb_drops_correction_without_outcome_moment_covariance() {
        let cov = scalar_cov(2.0, 0.0, 0.0, 3.0, 4.0, 1.0, 5.0, 0.5);
        assert_abs_diff_eq!(v_eb(&cov).unwrap(), (3.0 + 5.0) / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn v_eb_scalar_hand_evaluation() {
        // p = 1 synthetic values, evaluated by hand:
        // correction = h_c0/h_c * (2 g_c0 - h_c0 - g_c h_c0/h_c + 2 h_c1)
        let (h_c, h_c0, h_c1, h_1, g_c, g_c0, g_0, pi) =
            (2.0, 0.6, -0.4, 3.0, 3.5, 0.9, 4.0, 0.4);
        let cov = scalar_cov(h_c, h_c0, h_c1, h_1, g_c, g_c0, g_0, pi);
        let correction = h_c0 / h_c * (2.0 * g_c0 - h_c0 - g_c * h_c0 / h_c + 2.0 * h_c1);
        let expected = (h_1 + g_0 - correction) / pi;
        assert_abs_diff_eq!(v_eb(&cov).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn v_eb_equals_bound_under_aligned_blocks() {
        // Construct H_{c,t} = H_c beta_t and G_{c,t} = G_c beta_t; the
        // closed form then collapses to the bound.
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        for _ in 0..10 {
            let p = 3;
            let raw = DMatrix::from_fn(p + 2, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let h_c = raw.transpose() * &raw;
            let raw2 = DMatrix::from_fn(p + 2, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let g_c = raw2.transpose() * &raw2 + DMatrix::identity(p, p) * 0.5;
            let beta0 = DVector::from_fn(p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let beta1 = DVector::from_fn(p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let h_c0 = &h_c * &beta0;
            let h_c1 = &h_c * &beta1;
            let g_c0 = &g_c * &beta0;
            // h_1 and g_0 just need to keep the variances positive.
            let h_1 = 5.0 + beta1.dot(&(&h_c * &beta1));
            let g_0 = 5.0 + beta0.dot(&(&g_c * &beta0));
            let cov = MomentCovariances {
                h_c,
                h_c0,
                h_c1,
                h_1,
                g_c,
                g_c0,
                g_0,
                k_c: DMatrix::identity(p, p),
                km_c0: DVector::zeros(p),
                km_c1: DVector::zeros(p),
                pi: 0.5,
            };
            let veb = v_eb(&cov).unwrap();
            let vb = v_bound(&cov).unwrap();
            assert_abs_diff_eq!(veb, vb, epsilon = 1e-8);
        }
    }

    #[test]
    fn plugin_v_eb_below_v_ipw_under_joint_correctness() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let (data, e) = linear_dgp(&mut rng, 50_000, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let cov = plugin_moment_covariances(&data, &e, &spec).unwrap();
        let veb = v_eb(&cov).unwrap();
        let vipw = v_ipw(&cov).unwrap();
        assert!(veb > 0.0 && vipw > 0.0);
        assert!(veb <= vipw, "v_eb {veb} vs v_ipw {vipw}");
        // Both models linear: the balancing variance attains the bound. The
        // blocks are estimated under different conditioning weights, so the
        // agreement is statistical, not algebraic.
        let vb = v_bound(&cov).unwrap();
        assert!((veb - vb).abs() / vb < 0.1, "v_eb {veb} vs bound {vb}");
    }

    #[test]
    fn ipw_sandwich_runs_and_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let (data, _) = linear_dgp(&mut rng, 400, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let fit =
            crate::propensity::fit_logistic_mle(data.covariates(), data.treatment(), true)
                .unwrap();
        let v = ipw_sandwich_patt(&data, &spec, &fit).unwrap();
        assert!(v.variance > 0.0);
        assert!(v.condition_number.is_finite());
        let vs = ipw_sandwich_survey(&data, &spec, &fit).unwrap();
        assert!(vs.variance > 0.0);
    }

    #[test]
    fn sandwich_tracks_plugin_variance_on_large_sample() {
        // On a large jointly-correct sample the sandwich variance (x n) and
        // the plug-in closed form agree within a few percent.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (data, e) = linear_dgp(&mut rng, 100_000, 1.0);
        let spec = MomentSpec::raw_range(0, 2);
        let sol = solved_tol(&data, &spec, 1e-9);
        let sw = eb_sandwich_patt(&data, &spec, &sol).unwrap();
        let cov = plugin_moment_covariances(&data, &e, &spec).unwrap();
        let veb = v_eb(&cov).unwrap();
        let scaled = sw.variance * data.n() as f64;
        assert!(
            ((scaled - veb) / veb).abs() < 0.05,
            "sandwich x n = {scaled} vs closed form {veb}"
        );
    }
}
