//! Dual solver for entropy-balancing weights.
//!
//! The primal problem maximizes the entropy of weights on the source units
//! subject to exact moment constraints; its dual is an unconstrained convex
//! log-sum-exp minimization over tilt coefficients. With a ridge term the
//! dual becomes the softened variant in which moment matching is traded off
//! against the squared norm of the tilt.
//!
//! Internally the solver standardizes the moment columns by source-group
//! statistics for conditioning; reported coefficients and residuals are in
//! the original scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, column_means, column_sds, hull_l1_distance, log_sum_exp, select_rows, softmax};
use crate::model::{BalanceTarget, MomentSpec, ObservationalDataset};
use crate::scalar::Scalar;

/// Newton/line-search controls for the dual solve.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings<T: Scalar> {
    /// Max-norm of the dual gradient (on standardized features) at termination.
    pub grad_tol: T,
    pub max_iter: usize,
    /// Armijo backtracking factor, in (0, 1).
    pub backtrack: T,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: T,
    /// Norm of the standardized tilt beyond which the solver suspects an
    /// infeasible target and consults the hull-membership test.
    pub divergence_threshold: T,
}

impl<T: Scalar> Default for SolverSettings<T> {
    fn default() -> Self {
        Self {
            grad_tol: T::of(1e-9),
            max_iter: 100,
            backtrack: T::of(0.5),
            sufficient_decrease: T::of(1e-4),
            divergence_threshold: T::of(1e4),
        }
    }
}

impl<T: Scalar> SolverSettings<T> {
    fn validate(&self) -> Result<()> {
        if self.grad_tol.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidInput("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.backtrack > T::zero() && self.backtrack < T::one()) {
            return Err(Error::InvalidInput("backtrack factor must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// The convex program: source moments, target, and relaxation strength.
#[derive(Debug, Clone)]
pub struct BalanceProblem<T: Scalar> {
    source_moments: DMatrix<T>,
    target: BalanceTarget<T>,
    ridge: T,
    settings: SolverSettings<T>,
}

impl<T: Scalar> BalanceProblem<T> {
    pub fn new(source_moments: DMatrix<T>, target: BalanceTarget<T>, ridge: T) -> Result<Self> {
        if source_moments.nrows() == 0 {
            return Err(Error::InvalidInput(
                "balance problem needs at least one source unit".into(),
            ));
        }
        if target.len() != source_moments.ncols() {
            return Err(Error::InvalidInput(format!(
                "target has {} entries but source moments have {} columns",
                target.len(),
                source_moments.ncols()
            )));
        }
        if ridge < T::zero() || !ridge.is_finite() {
            return Err(Error::InvalidInput("ridge must be finite and nonnegative".into()));
        }
        if source_moments.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("source moments contain non-finite values".into()));
        }
        Ok(Self { source_moments, target, ridge, settings: SolverSettings::default() })
    }

    pub fn with_settings(mut self, settings: SolverSettings<T>) -> Self {
        self.settings = settings;
        self
    }

    pub fn source_moments(&self) -> &DMatrix<T> {
        &self.source_moments
    }

    pub fn target(&self) -> &BalanceTarget<T> {
        &self.target
    }

    pub fn ridge(&self) -> T {
        self.ridge
    }

    pub fn settings(&self) -> &SolverSettings<T> {
        &self.settings
    }

    pub fn n_source(&self) -> usize {
        self.source_moments.nrows()
    }

    pub fn n_moments(&self) -> usize {
        self.source_moments.ncols()
    }
}

/// Standard construction for treatment-effect estimation: reweight controls
/// toward the treated-group moment means.
pub fn patt_problem<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    ridge: T,
) -> Result<BalanceProblem<T>> {
    let moments = crate::model::evaluate_moments(data, spec)?;
    let target = crate::model::treated_moment_target(&moments, data.treatment())?;
    let controls: Vec<bool> = data.treatment().iter().map(|&t| !t).collect();
    if !controls.iter().any(|&c| c) {
        return Err(Error::EstimandUndefined("no control units to reweight".into()));
    }
    BalanceProblem::new(select_rows(&moments, &controls), target, ridge)
}

/// Survey-mode construction: reweight the units with observed outcomes
/// (treatment = 1) toward the full-sample moment means.
pub fn survey_problem<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
    ridge: T,
) -> Result<BalanceProblem<T>> {
    let moments = crate::model::evaluate_moments(data, spec)?;
    let target = crate::model::full_sample_target(&moments);
    if !data.treatment().iter().any(|&t| t) {
        return Err(Error::EstimandUndefined("no respondent units to reweight".into()));
    }
    BalanceProblem::new(select_rows(&moments, data.treatment()), target, ridge)
}

/// How a solve terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    InfeasibleDetected,
    MaxIter,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::InfeasibleDetected => "infeasible-detected",
            SolveStatus::MaxIter => "max-iter",
        })
    }
}

/// Dual coefficients, primal weights, and convergence diagnostics.
#[derive(Debug, Clone)]
pub struct BalanceSolution<T: Scalar> {
    /// Tilt coefficients in the original moment scale.
    pub theta: DVector<T>,
    /// Weights on the source units: strictly positive, summing to one.
    pub weights: DVector<T>,
    pub iterations: usize,
    /// `sum_i w_i c_j(X_i) - target_j` in the original scale.
    pub residual_imbalance: DVector<T>,
    pub dual_value: T,
    pub status: SolveStatus,
}

impl<T: Scalar> BalanceSolution<T> {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn sum_sq_weights(&self) -> T {
        self.weights.iter().map(|&w| w * w).sum()
    }

    /// `1 / sum_i w_i^2`, the usual dispersion diagnostic.
    pub fn effective_sample_size(&self) -> T {
        T::one() / self.sum_sq_weights()
    }

    pub fn max_abs_imbalance(&self) -> T {
        self.residual_imbalance.amax()
    }
}

/// Dual objective at `theta` (original scale): the log-sum-exp of the
/// target-centered tilts over the source units, plus the ridge term.
///
/// For `ridge = 0` this equals `log(sum_i exp(theta . c_i)) - theta . target`
/// exactly, since the centering constant factors out of the log-sum-exp.
pub fn dual_objective<T: Scalar>(theta: &DVector<T>, problem: &BalanceProblem<T>) -> T {
    let eta = centered_tilts(theta, problem);
    let half = T::of(0.5);
    log_sum_exp(&eta) + half * problem.ridge * theta.dot(theta)
}

/// Gradient of the dual: softmax-weighted source moment mean minus the
/// target, plus `ridge * theta`.
pub fn dual_gradient<T: Scalar>(theta: &DVector<T>, problem: &BalanceProblem<T>) -> DVector<T> {
    let eta = centered_tilts(theta, problem);
    let w = softmax(&eta);
    let mut g = problem.source_moments.transpose() * &w - problem.target.values();
    g.axpy(problem.ridge, theta, T::one());
    g
}

/// Hessian of the dual: the softmax-weighted covariance of the source
/// moments, plus `ridge * I`. Symmetric positive semidefinite.
pub fn dual_hessian<T: Scalar>(theta: &DVector<T>, problem: &BalanceProblem<T>) -> DMatrix<T> {
    let eta = centered_tilts(theta, problem);
    let w = softmax(&eta);
    let c = &problem.source_moments;
    let mean = c.transpose() * &w;
    let mut h = weighted_scatter(c, &w, &mean);
    for j in 0..c.ncols() {
        h[(j, j)] += problem.ridge;
    }
    h
}

fn centered_tilts<T: Scalar>(theta: &DVector<T>, problem: &BalanceProblem<T>) -> DVector<T> {
    let shift = problem.target.values().dot(theta);
    let mut eta = &problem.source_moments * theta;
    eta.add_scalar_mut(-shift);
    eta
}

/// `sum_i w_i (c_i - mean)(c_i - mean)^T`.
fn weighted_scatter<T: Scalar>(c: &DMatrix<T>, w: &DVector<T>, mean: &DVector<T>) -> DMatrix<T> {
    let p = c.ncols();
    let mut h = DMatrix::zeros(p, p);
    for i in 0..c.nrows() {
        let d = c.row(i).transpose() - mean;
        for r in 0..p {
            let wr = w[i] * d[r];
            for s in r..p {
                h[(r, s)] += wr * d[s];
            }
        }
    }
    for r in 0..p {
        for s in (r + 1)..p {
            h[(s, r)] = h[(r, s)];
        }
    }
    h
}

/// A priori classification of the balance constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    /// The target lies strictly inside the convex hull of the source moments.
    Feasible,
    /// The target lies outside the hull: no positive weights can balance it.
    Infeasible,
    /// The target sits on (or within tolerance of) the hull boundary.
    Boundary,
}

impl std::fmt::Display for Feasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Feasibility::Feasible => "feasible",
            Feasibility::Infeasible => "infeasible",
            Feasibility::Boundary => "boundary",
        })
    }
}

/// Hull-membership distance below which a target counts as on the hull.
const MEMBERSHIP_TOL: f64 = 1e-7;
/// Step used to probe whether the target has interior room in every
/// coordinate direction (standardized scale).
const PROBE_STEP: f64 = 1e-6;

/// Linear-programming membership test: is the target inside, outside, or on
/// the boundary of the convex hull of the source moment rows?
///
/// Relaxed problems (`ridge > 0`) are always feasible.
pub fn check_feasibility<T: Scalar>(problem: &BalanceProblem<T>) -> Feasibility {
    if problem.ridge > T::zero() {
        return Feasibility::Feasible;
    }
    if problem.n_source() == 1 {
        let row = problem.source_moments.row(0).transpose();
        let close = single_row_matches(&row, problem.target.values());
        return if close { Feasibility::Boundary } else { Feasibility::Infeasible };
    }
    let (z, zt) = standardize_lenient(problem);
    classify_target(&z, &zt)
}

fn classify_target<T: Scalar>(z: &DMatrix<T>, zt: &DVector<T>) -> Feasibility {
    let membership_tol = T::of(MEMBERSHIP_TOL);
    let dist = hull_l1_distance(z, zt);
    if dist > membership_tol {
        return Feasibility::Infeasible;
    }
    let probe = T::of(PROBE_STEP);
    let exit_tol = probe * T::of(0.5);
    for j in 0..zt.len() {
        for sign in [T::one(), -T::one()] {
            let mut shifted = zt.clone();
            shifted[j] += sign * probe;
            if hull_l1_distance(z, &shifted) > exit_tol {
                return Feasibility::Boundary;
            }
        }
    }
    Feasibility::Feasible
}

fn single_row_matches<T: Scalar>(row: &DVector<T>, target: &DVector<T>) -> bool {
    (0..row.len()).all(|j| {
        let scale = T::one().max(target[j].abs());
        (row[j] - target[j]).abs() <= T::of(1e-8) * scale
    })
}

/// Standardization that tolerates constant columns (scale 1) for the
/// feasibility test; the Newton solve itself rejects them.
fn standardize_lenient<T: Scalar>(problem: &BalanceProblem<T>) -> (DMatrix<T>, DVector<T>) {
    let c = &problem.source_moments;
    let mu = column_means(c);
    let sd = column_sds(c);
    let p = c.ncols();
    let mut z = c.clone();
    let mut zt = problem.target.values().clone();
    for j in 0..p {
        let scale = if sd[j] > constant_threshold(mu[j]) { sd[j] } else { T::one() };
        for i in 0..c.nrows() {
            z[(i, j)] = (c[(i, j)] - mu[j]) / scale;
        }
        zt[j] = (zt[j] - mu[j]) / scale;
    }
    (z, zt)
}

fn constant_threshold<T: Scalar>(mean: T) -> T {
    T::of(1e-13) * (T::one() + mean.abs())
}

/// Solve the dual by Newton iteration with Armijo backtracking and recover
/// the primal weights from the stationarity conditions.
///
/// Returns an error for structurally unusable inputs (constant moment
/// columns); mathematical non-existence is reported through
/// [`SolveStatus::InfeasibleDetected`] on the solution.
pub fn solve<T: Scalar>(problem: &BalanceProblem<T>) -> Result<BalanceSolution<T>> {
    problem.settings.validate()?;
    let c = &problem.source_moments;
    let target = problem.target.values();
    let (n0, p) = c.shape();

    // Hull of a single point.
    if n0 == 1 {
        let row = c.row(0).transpose();
        let residual = &row - target;
        let status = if single_row_matches(&row, target) {
            SolveStatus::Converged
        } else {
            SolveStatus::InfeasibleDetected
        };
        return Ok(BalanceSolution {
            theta: DVector::zeros(p),
            weights: DVector::from_element(1, T::one()),
            iterations: 0,
            residual_imbalance: residual,
            dual_value: T::zero(),
            status,
        });
    }

    // Standardize by source statistics; reject zero-variance columns.
    let mu = column_means(c);
    let sd = column_sds(c);
    for j in 0..p {
        if sd[j] <= constant_threshold(mu[j]) {
            return Err(Error::ConstantColumn { column: j });
        }
    }
    let mut z = c.clone();
    let mut zt = target.clone();
    for j in 0..p {
        for i in 0..n0 {
            z[(i, j)] = (c[(i, j)] - mu[j]) / sd[j];
        }
        zt[j] = (zt[j] - mu[j]) / sd[j];
    }
    // Target-centered standardized features; the dual gradient in this
    // parameterization is exactly the weighted residual imbalance.
    let mut u = z.clone();
    for i in 0..n0 {
        for j in 0..p {
            u[(i, j)] -= zt[j];
        }
    }
    // Pullback of the original-scale ridge `lambda/2 ||theta||^2`.
    let ridge_diag: DVector<T> =
        DVector::from_iterator(p, (0..p).map(|j| problem.ridge / (sd[j] * sd[j])));

    let settings = &problem.settings;
    let mut theta = DVector::<T>::zeros(p);
    let mut f = objective_std(&u, &theta, &ridge_diag);
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut lp_checked = false;

    for iter in 0..settings.max_iter {
        let eta = &u * &theta;
        let w = softmax(&eta);
        let mut grad = u.transpose() * &w;
        for j in 0..p {
            grad[j] += ridge_diag[j] * theta[j];
        }
        if grad.amax() <= settings.grad_tol {
            status = SolveStatus::Converged;
            iterations = iter;
            break;
        }
        // Divergence heuristic: a runaway tilt with a gradient that refuses
        // to vanish suggests the target is outside the source hull. The LP
        // gives the definitive answer; it runs at most once.
        if !lp_checked
            && theta.norm() > settings.divergence_threshold
            && grad.amax() > settings.grad_tol * T::of(10.0)
        {
            lp_checked = true;
            if classify_target(&z, &zt) != Feasibility::Feasible {
                status = SolveStatus::InfeasibleDetected;
                iterations = iter;
                break;
            }
        }

        // Newton direction on the standardized dual.
        let mean = u.transpose() * &w;
        let mut h = weighted_scatter(&u, &w, &mean);
        for j in 0..p {
            h[(j, j)] += ridge_diag[j];
        }
        let dir = linalg::solve_spd(&h, &(-&grad), "dual Newton step")?;

        // Armijo backtracking.
        let slope = grad.dot(&dir);
        let mut step = T::one();
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta + &dir * step;
            let f_new = objective_std(&u, &candidate, &ridge_diag);
            if f_new <= f + settings.sufficient_decrease * step * slope {
                theta = candidate;
                f = f_new;
                accepted = true;
                break;
            }
            step *= settings.backtrack;
        }
        iterations = iter + 1;
        if !accepted {
            // The line search stalled; settle the feasibility question and stop.
            if !lp_checked && classify_target(&z, &zt) != Feasibility::Feasible {
                status = SolveStatus::InfeasibleDetected;
            }
            break;
        }
    }

    // Primal recovery: weights are the softmax of the tilts; the map back to
    // the original scale divides by the per-column standard deviations.
    let eta = &u * &theta;
    let weights = softmax(&eta);
    let theta_orig = DVector::from_iterator(p, (0..p).map(|j| theta[j] / sd[j]));
    let residual = c.transpose() * &weights - target;

    Ok(BalanceSolution {
        theta: theta_orig,
        weights,
        iterations,
        residual_imbalance: residual,
        dual_value: f,
        status,
    })
}

fn objective_std<T: Scalar>(u: &DMatrix<T>, theta: &DVector<T>, ridge_diag: &DVector<T>) -> T {
    let eta = u * theta;
    let half = T::of(0.5);
    let ridge: T = (0..theta.len()).map(|j| ridge_diag[j] * theta[j] * theta[j]).sum();
    log_sum_exp(&eta) + half * ridge
}

/// Weighted moment imbalance, scaled per column: entry j is
/// `(sum_i w_i c_ij - target_j) / scale_j`.
///
/// Callers pass the target-group standard deviations as `scale`;
/// non-positive scale entries fall back to 1 so constant moments stay
/// readable.
pub fn imbalance_report<T: Scalar>(
    weights: &DVector<T>,
    source_moments: &DMatrix<T>,
    target: &BalanceTarget<T>,
    scale: &DVector<T>,
) -> DVector<T> {
    debug_assert_eq!(weights.len(), source_moments.nrows());
    debug_assert_eq!(target.len(), source_moments.ncols());
    let raw = source_moments.transpose() * weights - target.values();
    DVector::from_iterator(
        raw.len(),
        raw.iter().enumerate().map(|(j, &r)| {
            let s = if scale[j] > T::zero() { scale[j] } else { T::one() };
            r / s
        }),
    )
}
