//! Point estimators of the treated-group counterfactual mean, the treatment
//! effect on the treated, and (in survey mode) a population mean.
//!
//! Treatment-effect estimators reweight control units; their survey-mode
//! counterparts (`*_mean_*`) reweight the units with observed outcomes
//! (treatment = 1) toward full-sample moments and estimate the population
//! mean of the outcome.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, select_rows};
use crate::model::{
    evaluate_moments, Estimand, EstimateReport, EstimatorId, MomentSpec, ObservationalDataset,
};
use crate::propensity::{ipw_att_weights, ipw_mean_weights, PropensityFit};
use crate::scalar::Scalar;
use crate::solver::BalanceSolution;

const RANK_TOL: f64 = 1e-10;

/// A linear outcome regression fit: intercept plus the moment features.
#[derive(Debug, Clone)]
pub struct OutcomeFit<T: Scalar> {
    /// Coefficients; the intercept comes first.
    pub beta: DVector<T>,
    /// The moment functions used as regression features.
    pub feature_spec: MomentSpec<T>,
    /// Whether the fit used control units (treatment-effect mode) or
    /// respondent units (survey mode).
    pub fit_on_treated: bool,
}

impl<T: Scalar> OutcomeFit<T> {
    /// Predictions on every unit of `data`.
    pub fn predict(&self, data: &ObservationalDataset<T>) -> Result<DVector<T>> {
        let features = evaluate_moments(data, &self.feature_spec)?;
        let mut out = DVector::from_element(data.n(), self.beta[0]);
        for i in 0..data.n() {
            for j in 0..features.ncols() {
                out[i] += self.beta[j + 1] * features[(i, j)];
            }
        }
        Ok(out)
    }
}

/// Least-squares fit of the observed outcomes in one group on an intercept
/// plus the moment features, optionally weighted.
fn fit_outcome_group<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    on_treated: bool,
    weights: Option<&DVector<T>>,
    context: &str,
) -> Result<OutcomeFit<T>> {
    let features = evaluate_moments(data, spec)?;
    let mask: Vec<bool> = data.treatment().iter().map(|&t| t == on_treated).collect();
    let rows = select_rows(&features, &mask);
    let y = data.group_outcomes(on_treated, context)?;
    let n = rows.nrows();
    let mut design = DMatrix::from_element(n, rows.ncols() + 1, T::one());
    design.view_mut((0, 1), (n, rows.ncols())).copy_from(&rows);
    let beta = linalg::weighted_least_squares(&design, &y, weights, T::of(RANK_TOL))?;
    Ok(OutcomeFit { beta, feature_spec: spec.clone(), fit_on_treated: on_treated })
}

/// OLS fit of the control outcomes on the moment features (the implicit
/// model for the unexposed response). An intercept is always included.
pub fn fit_outcome_ols<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
) -> Result<OutcomeFit<T>> {
    fit_outcome_group(data, spec, false, None, "control outcome regression")
}

/// Survey-mode OLS fit: regresses the observed (treatment = 1) outcomes on
/// the moment features.
pub fn fit_outcome_ols_respondents<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
) -> Result<OutcomeFit<T>> {
    fit_outcome_group(data, spec, true, None, "respondent outcome regression")
}

fn weighted_outcome_sum<T: Scalar>(
    data: &ObservationalDataset<T>,
    weights: &DVector<T>,
    on_treated: bool,
    context: &str,
) -> Result<T> {
    let y = data.group_outcomes(on_treated, context)?;
    if y.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} units",
            weights.len(),
            y.len()
        )));
    }
    Ok(weights.dot(&y))
}

fn require_converged<T: Scalar>(solution: &BalanceSolution<T>) -> Result<()> {
    if !solution.is_converged() {
        return Err(Error::NotConverged { status: solution.status.to_string() });
    }
    Ok(())
}

fn balance_diagnostics<T: Scalar>(
    mut report: EstimateReport<T>,
    solution: &BalanceSolution<T>,
) -> EstimateReport<T> {
    report = report
        .with_diagnostic("iterations", T::of(solution.iterations as f64))
        .with_diagnostic("sum_sq_weights", solution.sum_sq_weights())
        .with_diagnostic("effective_sample_size", solution.effective_sample_size())
        .with_diagnostic("max_abs_imbalance", solution.max_abs_imbalance());
    report
}

// ---------------------------------------------------------------------------
// Treatment-effect estimators (estimand: PATT)
// ---------------------------------------------------------------------------

/// Weight-normalized inverse-probability estimate of the treatment effect on
/// the treated: treated outcome mean minus the odds-weighted control mean.
pub fn estimate_ipw<T: Scalar>(
    data: &ObservationalDataset<T>,
    fit: &PropensityFit<T>,
) -> Result<EstimateReport<T>> {
    let w = ipw_att_weights(fit, data.treatment())?;
    let treated_mean = data.group_outcome_mean(true, "ipw treated mean")?;
    let mu0 = weighted_outcome_sum(data, &w, false, "ipw control mean")?;
    let report = EstimateReport::new(Estimand::Patt, EstimatorId::Ipw, treated_mean - mu0)
        .with_diagnostic("mu0_hat", mu0)
        .with_diagnostic("sum_sq_weights", w.iter().map(|&x| x * x).sum());
    Ok(report)
}

/// Outcome-regression estimate: the treated-group mean residual against the
/// control-model predictions.
pub fn estimate_ols<T: Scalar>(
    data: &ObservationalDataset<T>,
    fit: &OutcomeFit<T>,
) -> Result<EstimateReport<T>> {
    let predictions = fit.predict(data)?;
    let y1 = data.group_outcomes(true, "ols treated residuals")?;
    let idx = data.group_indices(true);
    let n1 = T::of(idx.len() as f64);
    let mut gamma = T::zero();
    let mut mu0 = T::zero();
    for (k, &i) in idx.iter().enumerate() {
        gamma += (y1[k] - predictions[i]) / n1;
        mu0 += predictions[i] / n1;
    }
    Ok(EstimateReport::new(Estimand::Patt, EstimatorId::Ols, gamma)
        .with_diagnostic("mu0_hat", mu0))
}

/// Doubly robust estimate: the outcome-regression estimate minus the
/// odds-weighted mean of the control residuals.
pub fn estimate_dr<T: Scalar>(
    data: &ObservationalDataset<T>,
    pfit: &PropensityFit<T>,
    ofit: &OutcomeFit<T>,
) -> Result<EstimateReport<T>> {
    let ols = estimate_ols(data, ofit)?;
    let w = ipw_att_weights(pfit, data.treatment())?;
    let predictions = ofit.predict(data)?;
    let y0 = data.group_outcomes(false, "dr control residuals")?;
    let idx = data.group_indices(false);
    let mut correction = T::zero();
    for (k, &i) in idx.iter().enumerate() {
        correction += w[k] * (y0[k] - predictions[i]);
    }
    Ok(EstimateReport::new(Estimand::Patt, EstimatorId::Dr, ols.point - correction)
        .with_diagnostic("bias_correction", correction)
        .with_diagnostic("ols_point", ols.point))
}

/// Balancing-weight estimate: treated outcome mean minus the weighted
/// control outcome mean. Requires a converged solution with weights indexed
/// to the control units.
pub fn estimate_eb<T: Scalar>(
    data: &ObservationalDataset<T>,
    solution: &BalanceSolution<T>,
) -> Result<EstimateReport<T>> {
    require_converged(solution)?;
    let treated_mean = data.group_outcome_mean(true, "balance-weight treated mean")?;
    let mu0 = weighted_outcome_sum(data, &solution.weights, false, "balance-weight control mean")?;
    let report = EstimateReport::new(Estimand::Patt, EstimatorId::Eb, treated_mean - mu0)
        .with_diagnostic("mu0_hat", mu0);
    Ok(balance_diagnostics(report, solution))
}

/// Residual-corrected balancing estimate: the doubly robust form with the
/// balancing weights in place of the propensity odds.
pub fn estimate_eb_dr<T: Scalar>(
    data: &ObservationalDataset<T>,
    solution: &BalanceSolution<T>,
    ofit: &OutcomeFit<T>,
) -> Result<EstimateReport<T>> {
    require_converged(solution)?;
    let predictions = ofit.predict(data)?;
    let y1 = data.group_outcomes(true, "residual-corrected treated mean")?;
    let t_idx = data.group_indices(true);
    let n1 = T::of(t_idx.len() as f64);
    let mut treated_part = T::zero();
    for (k, &i) in t_idx.iter().enumerate() {
        treated_part += (y1[k] - predictions[i]) / n1;
    }
    let y0 = data.group_outcomes(false, "residual-corrected control mean")?;
    let c_idx = data.group_indices(false);
    if y0.len() != solution.weights.len() {
        return Err(Error::InvalidInput("weights are not indexed to the control units".into()));
    }
    let mut control_part = T::zero();
    for (k, &i) in c_idx.iter().enumerate() {
        control_part += solution.weights[k] * (y0[k] - predictions[i]);
    }
    let report =
        EstimateReport::new(Estimand::Patt, EstimatorId::EbDr, treated_part - control_part)
            .with_diagnostic("bias_correction", control_part);
    Ok(balance_diagnostics(report, solution))
}

/// Weighted-regression estimate: fit the control outcomes by least squares
/// under the balancing weights, then average the treated residuals against
/// the fit.
pub fn estimate_eb_wls<T: Scalar>(
    data: &ObservationalDataset<T>,
    solution: &BalanceSolution<T>,
    spec: &MomentSpec<T>,
) -> Result<EstimateReport<T>> {
    require_converged(solution)?;
    let ofit = fit_outcome_group(
        data,
        spec,
        false,
        Some(&solution.weights),
        "weighted control regression",
    )?;
    let predictions = ofit.predict(data)?;
    let y1 = data.group_outcomes(true, "weighted-regression treated mean")?;
    let idx = data.group_indices(true);
    let n1 = T::of(idx.len() as f64);
    let mut gamma = T::zero();
    for (k, &i) in idx.iter().enumerate() {
        gamma += (y1[k] - predictions[i]) / n1;
    }
    let report = EstimateReport::new(Estimand::Patt, EstimatorId::EbWls, gamma);
    Ok(balance_diagnostics(report, solution))
}

// ---------------------------------------------------------------------------
// Survey-mode estimators (estimand: population mean)
// ---------------------------------------------------------------------------

/// Inverse-probability estimate of the population outcome mean from the
/// respondents, with normalized `1/e` weights.
pub fn estimate_mean_ipw<T: Scalar>(
    data: &ObservationalDataset<T>,
    fit: &PropensityFit<T>,
) -> Result<EstimateReport<T>> {
    let w = ipw_mean_weights(fit, data.treatment())?;
    let mu = weighted_outcome_sum(data, &w, true, "survey ipw mean")?;
    Ok(EstimateReport::new(Estimand::PopulationMean, EstimatorId::Ipw, mu)
        .with_diagnostic("sum_sq_weights", w.iter().map(|&x| x * x).sum()))
}

/// Regression estimate of the population mean: predict every unit from the
/// respondent fit and average.
pub fn estimate_mean_ols<T: Scalar>(
    data: &ObservationalDataset<T>,
    fit: &OutcomeFit<T>,
) -> Result<EstimateReport<T>> {
    let predictions = fit.predict(data)?;
    let mu = predictions.sum() / T::of(data.n() as f64);
    Ok(EstimateReport::new(Estimand::PopulationMean, EstimatorId::Ols, mu))
}

/// Doubly robust estimate of the population mean: mean prediction plus the
/// weighted respondent residuals.
pub fn estimate_mean_dr<T: Scalar>(
    data: &ObservationalDataset<T>,
    pfit: &PropensityFit<T>,
    ofit: &OutcomeFit<T>,
) -> Result<EstimateReport<T>> {
    let base = estimate_mean_ols(data, ofit)?;
    let w = ipw_mean_weights(pfit, data.treatment())?;
    let predictions = ofit.predict(data)?;
    let y1 = data.group_outcomes(true, "survey dr residuals")?;
    let idx = data.group_indices(true);
    let mut correction = T::zero();
    for (k, &i) in idx.iter().enumerate() {
        correction += w[k] * (y1[k] - predictions[i]);
    }
    Ok(EstimateReport::new(Estimand::PopulationMean, EstimatorId::Dr, base.point + correction)
        .with_diagnostic("bias_correction", correction))
}

/// Balancing-weight estimate of the population mean from the respondents.
/// Requires a converged solution with weights indexed to the respondent
/// (treatment = 1) units.
pub fn estimate_mean_eb<T: Scalar>(
    data: &ObservationalDataset<T>,
    solution: &BalanceSolution<T>,
) -> Result<EstimateReport<T>> {
    require_converged(solution)?;
    let mu = weighted_outcome_sum(data, &solution.weights, true, "survey balance-weight mean")?;
    let report = EstimateReport::new(Estimand::PopulationMean, EstimatorId::Eb, mu);
    Ok(balance_diagnostics(report, solution))
}

/// Residual-corrected balancing estimate of the population mean.
pub fn estimate_mean_eb_dr<T: Scalar>(
    data: &ObservationalDataset<T>,
    solution: &BalanceSolution<T>,
    ofit: &OutcomeFit<T>,
) -> Result<EstimateReport<T>> {
    require_converged(solution)?;
    let base = estimate_mean_ols(data, ofit)?;
    let predictions = ofit.predict(data)?;
    let y1 = data.group_outcomes(true, "survey residual correction")?;
    let idx = data.group_indices(true);
    if y1.len() != solution.weights.len() {
        return Err(Error::InvalidInput(
            "weights are not indexed to the respondent units".into(),
        ));
    }
    let mut correction = T::zero();
    for (k, &i) in idx.iter().enumerate() {
        correction += solution.weights[k] * (y1[k] - predictions[i]);
    }
    let report =
        EstimateReport::new(Estimand::PopulationMean, EstimatorId::EbDr, base.point + correction)
            .with_diagnostic("bias_correction", correction);
    Ok(balance_diagnostics(report, solution))
}

/// Weighted-regression estimate of the population mean: fit the respondent
/// outcomes under the balancing weights and average the predictions over the
/// full sample.
pub fn estimate_mean_eb_wls<T: Scalar>(
    data: &ObservationalDataset<T>,
    solution: &BalanceSolution<T>,
    spec: &MomentSpec<T>,
) -> Result<EstimateReport<T>> {
    require_converged(solution)?;
    let ofit = fit_outcome_group(
        data,
        spec,
        true,
        Some(&solution.weights),
        "weighted respondent regression",
    )?;
    let predictions = ofit.predict(data)?;
    let mu = predictions.sum() / T::of(data.n() as f64);
    let report = EstimateReport::new(Estimand::PopulationMean, EstimatorId::EbWls, mu);
    Ok(balance_diagnostics(report, solution))
}

/// The weights implied by the outcome regression: the row vector
/// `(1/n1) 1' X1 [(X0)' X0]^-1 (X0)'` applied to the control outcomes
/// reproduces the regression estimate of the counterfactual mean, and
/// applied to the control features reproduces the treated feature means.
pub fn ols_implied_weights<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
) -> Result<DVector<T>> {
    let features = evaluate_moments(data, spec)?;
    let controls: Vec<bool> = data.treatment().iter().map(|&t| !t).collect();
    let x0 = select_rows(&features, &controls);
    let treated: Vec<bool> = data.treatment().to_vec();
    let x1 = select_rows(&features, &treated);
    let n0 = x0.nrows();
    let n1 = x1.nrows();
    let p = features.ncols() + 1;
    let mut d0 = DMatrix::from_element(n0, p, T::one());
    d0.view_mut((0, 1), (n0, p - 1)).copy_from(&x0);
    let mut d1 = DMatrix::from_element(n1, p, T::one());
    d1.view_mut((0, 1), (n1, p - 1)).copy_from(&x1);
    let gram = d0.transpose() * &d0;
    let mean1 = d1.row_sum().transpose() / T::of(n1 as f64);
    let solved = gram
        .lu()
        .solve(&mean1)
        .ok_or_else(|| Error::SingularMatrix { context: "implied weight solve".into() })?;
    Ok(&d0 * solved)
}
