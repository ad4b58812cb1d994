//! Maximum-likelihood logistic propensity model and the inverse-probability
//! weights built from it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, column_means, column_sds};
use crate::scalar::Scalar;

/// A fitted logistic model for `P(T = 1 | features)`.
#[derive(Debug, Clone)]
pub struct PropensityFit<T: Scalar> {
    /// Coefficients in the original feature scale; the intercept (when
    /// requested) comes first.
    pub theta: DVector<T>,
    pub intercept: bool,
    /// Fitted probabilities for every unit, strictly inside (0, 1).
    pub fitted: DVector<T>,
    pub converged: bool,
    pub loglik: T,
    pub iterations: usize,
}

impl<T: Scalar> PropensityFit<T> {
    /// Slope coefficients, excluding the intercept.
    pub fn slopes(&self) -> DVector<T> {
        if self.intercept {
            self.theta.rows(1, self.theta.len() - 1).into_owned()
        } else {
            self.theta.clone()
        }
    }
}

/// Norm of the standardized coefficient vector beyond which a non-shrinking
/// fit is declared separated.
const SEPARATION_NORM: f64 = 1e4;
/// Convergence bound on the max-norm of the mean score.
const SCORE_TOL: f64 = 1e-8;

/// Fit the logistic propensity model by Newton iteration (IRLS) with
/// step-halving.
///
/// Convergence means the per-observation mean score has max-norm at most
/// 1e-8. Diverging coefficients with a non-vanishing score raise
/// [`Error::Separation`], the non-existence condition for the MLE.
pub fn fit_logistic_mle<T: Scalar>(
    moments: &DMatrix<T>,
    treatment: &[bool],
    intercept: bool,
) -> Result<PropensityFit<T>> {
    let n = moments.nrows();
    if n == 0 || treatment.len() != n {
        return Err(Error::InvalidInput("moments and treatment must have matching rows".into()));
    }
    let n1 = treatment.iter().filter(|&&t| t).count();
    if n1 == 0 || n1 == n {
        return Err(Error::InvalidInput(
            "logistic fit needs both treated and control units".into(),
        ));
    }

    // Internal standardization of the feature columns. With an intercept the
    // columns are centered and scaled; without one only scaled, so the model
    // span is preserved.
    let mu = column_means(moments);
    let sd = column_sds(moments);
    let d = moments.ncols();
    let mut scale = DVector::from_element(d, T::one());
    for j in 0..d {
        if sd[j] > T::of(1e-13) * (T::one() + mu[j].abs()) {
            scale[j] = sd[j];
        }
    }
    let p = d + usize::from(intercept);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        if intercept {
            x[(i, 0)] = T::one();
        }
        for j in 0..d {
            let centered = if intercept { moments[(i, j)] - mu[j] } else { moments[(i, j)] };
            x[(i, usize::from(intercept) + j)] = centered / scale[j];
        }
    }
    let y =
        DVector::from_iterator(n, treatment.iter().map(|&t| if t { T::one() } else { T::zero() }));

    let mut theta = DVector::<T>::zeros(p);
    let mut loglik = loglik_at(&x, &y, &theta);
    let mut converged = false;
    let mut iterations = 0;
    let max_iter = 100;
    let n_t = T::of(n as f64);

    for iter in 0..max_iter {
        let eta = &x * &theta;
        let probs = eta.map(expit);
        let score = x.transpose() * (&y - &probs) / n_t;
        if score.amax() <= T::of(SCORE_TOL) {
            converged = true;
            iterations = iter;
            break;
        }
        if theta.norm() > T::of(SEPARATION_NORM) {
            return Err(Error::Separation);
        }
        // Fisher information of the mean log-likelihood.
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = probs[i] * (T::one() - probs[i]);
            let row = x.row(i).transpose();
            for r in 0..p {
                let wr = w * row[r] / n_t;
                for s in r..p {
                    info[(r, s)] += wr * row[s];
                }
            }
        }
        for r in 0..p {
            for s in (r + 1)..p {
                info[(s, r)] = info[(r, s)];
            }
        }
        let dir = linalg::solve_spd(&info, &score, "logistic Newton step")?;

        // Step-halving on the log-likelihood.
        let mut step = T::one();
        let mut accepted = false;
        for _ in 0..50 {
            let candidate = &theta + &dir * step;
            let ll = loglik_at(&x, &y, &candidate);
            if ll >= loglik {
                theta = candidate;
                loglik = ll;
                accepted = true;
                break;
            }
            step *= T::of(0.5);
        }
        iterations = iter + 1;
        if !accepted {
            break;
        }
    }

    if !converged {
        let eta = &x * &theta;
        let probs = eta.map(expit);
        let score = x.transpose() * (&y - &probs) / n_t;
        if score.amax() <= T::of(SCORE_TOL) {
            converged = true;
        } else if theta.norm() > T::of(SEPARATION_NORM) * T::of(0.1) {
            return Err(Error::Separation);
        }
    }

    // A vanishing score with every unit classified perfectly means the
    // likelihood has its infimum at infinity: the classes admit a separating
    // hyperplane and the MLE does not exist.
    if converged {
        let probs = (&x * &theta).map(expit);
        if (0..n).all(|i| (y[i] - probs[i]).abs() < T::of(1e-6)) {
            return Err(Error::Separation);
        }
    }

    // Map coefficients back to the original feature scale.
    let mut theta_orig = DVector::zeros(p);
    if intercept {
        let mut a = theta[0];
        for j in 0..d {
            let slope = theta[j + 1] / scale[j];
            theta_orig[j + 1] = slope;
            a -= slope * mu[j];
        }
        theta_orig[0] = a;
    } else {
        for j in 0..d {
            theta_orig[j] = theta[j] / scale[j];
        }
    }
    let fitted = (&x * &theta).map(expit);

    Ok(PropensityFit {
        theta: theta_orig,
        intercept,
        fitted,
        converged,
        loglik: loglik * n_t,
        iterations,
    })
}

fn expit<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

fn loglik_at<T: Scalar>(x: &DMatrix<T>, y: &DVector<T>, theta: &DVector<T>) -> T {
    // Mean log-likelihood, written with log1p for stability on large tilts.
    let eta = x * theta;
    let mut ll = T::zero();
    for i in 0..y.len() {
        let e = eta[i];
        let signed = if y[i] > T::of(0.5) { e } else { -e };
        // log(1 + exp(-signed)) = -min(signed, 0) + log1p(exp(-|signed|))
        let loss = (-signed.abs()).exp().ln_1p() - signed.min(T::zero());
        ll -= loss;
    }
    ll / T::of(y.len() as f64)
}

/// Weights on the control units proportional to the fitted odds
/// `e / (1 - e)`, normalized to sum to one: the control-side weights of the
/// weight-normalized inverse-probability estimator of the treated-group
/// counterfactual mean.
pub fn ipw_att_weights<T: Scalar>(
    fit: &PropensityFit<T>,
    treatment: &[bool],
) -> Result<DVector<T>> {
    if !fit.converged {
        return Err(Error::NotConverged { status: "logistic fit did not converge".into() });
    }
    if fit.fitted.len() != treatment.len() {
        return Err(Error::InvalidInput("fit and treatment length mismatch".into()));
    }
    let bound = T::one() - T::of(1e-12);
    let mut raw = Vec::new();
    for (i, &t) in treatment.iter().enumerate() {
        if !t {
            let e = fit.fitted[i];
            if e >= bound {
                return Err(Error::OverlapViolation { unit: i, value: e.to_f64_lossy() });
            }
            raw.push(e / (T::one() - e));
        }
    }
    if raw.is_empty() {
        return Err(Error::EstimandUndefined("no control units to weight".into()));
    }
    let mut w = DVector::from_vec(raw);
    let s: T = w.iter().copied().sum();
    w /= s;
    Ok(w)
}

/// Weights on the respondent units (treatment = 1) proportional to the
/// inverse fitted probability `1 / e`, normalized to sum to one: the
/// survey-mode nonresponse weights.
pub fn ipw_mean_weights<T: Scalar>(
    fit: &PropensityFit<T>,
    treatment: &[bool],
) -> Result<DVector<T>> {
    if !fit.converged {
        return Err(Error::NotConverged { status: "logistic fit did not converge".into() });
    }
    if fit.fitted.len() != treatment.len() {
        return Err(Error::InvalidInput("fit and treatment length mismatch".into()));
    }
    let floor = T::of(1e-12);
    let mut raw = Vec::new();
    for (i, &t) in treatment.iter().enumerate() {
        if t {
            let e = fit.fitted[i];
            if e <= floor {
                return Err(Error::OverlapViolation { unit: i, value: e.to_f64_lossy() });
            }
            raw.push(T::one() / e);
        }
    }
    if raw.is_empty() {
        return Err(Error::EstimandUndefined("no respondent units to weight".into()));
    }
    let mut w = DVector::from_vec(raw);
    let s: T = w.iter().copied().sum();
    w /= s;
    Ok(w)
}
