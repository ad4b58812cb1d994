//! Small numeric helpers shared by the solver and estimation modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Log of the sum of exponentials of `v`, computed with max subtraction.
pub fn log_sum_exp<T: Scalar>(v: &DVector<T>) -> T {
    let m = v.iter().copied().fold(T::of(f64::NEG_INFINITY), |a, b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let s: T = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of `v`: strictly positive weights summing to one.
pub fn softmax<T: Scalar>(v: &DVector<T>) -> DVector<T> {
    let m = v.iter().copied().fold(T::of(f64::NEG_INFINITY), |a, b| a.max(b));
    let mut w = v.map(|x| (x - m).exp());
    let s: T = w.iter().copied().sum();
    w /= s;
    w
}

/// Per-column means of `m`.
pub fn column_means<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let n = T::of(m.nrows() as f64);
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Per-column sample standard deviations of `m` (n-1 denominator; 0 for a
/// single row).
pub fn column_sds<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let n = m.nrows();
    if n < 2 {
        return DVector::zeros(m.ncols());
    }
    let means = column_means(m);
    let denom = T::of((n - 1) as f64);
    DVector::from_iterator(
        m.ncols(),
        m.column_iter().enumerate().map(|(j, c)| {
            let s: T = c.iter().map(|&x| (x - means[j]) * (x - means[j])).sum();
            (s / denom).sqrt()
        }),
    )
}

/// Mean of the rows of `m` selected by `mask`.
pub fn masked_column_means<T: Scalar>(m: &DMatrix<T>, mask: &[bool]) -> Result<DVector<T>> {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::EstimandUndefined("group selected by mask is empty".into()));
    }
    let mut acc = DVector::zeros(m.ncols());
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            acc += m.row(i).transpose();
        }
    }
    Ok(acc / T::of(count as f64))
}

/// Rows of `m` selected by `mask`, as a new matrix.
pub fn select_rows<T: Scalar>(m: &DMatrix<T>, mask: &[bool]) -> DMatrix<T> {
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    m.select_rows(&idx)
}

/// Solve the symmetric positive-definite system `a x = b` by Cholesky, adding
/// an escalating relative diagonal jitter if the factorization fails.
pub fn solve_spd<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>, context: &str) -> Result<DVector<T>> {
    debug_assert_eq!(a.nrows(), a.ncols());
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let scale = a.diagonal().iter().copied().fold(T::zero(), |s, d| s + d.abs())
        / T::of(a.nrows().max(1) as f64);
    let scale = if scale > T::zero() { scale } else { T::one() };
    let mut jitter = scale * T::of(1e-12);
    for _ in 0..8 {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(chol) = aj.cholesky() {
            return Ok(chol.solve(b));
        }
        jitter *= T::of(10.0);
    }
    Err(Error::SingularMatrix { context: context.to_string() })
}

/// Weighted least squares: minimize `sum_i w_i (y_i - x_i beta)^2`.
///
/// Solves via a QR factorization of the row-scaled design. The diagonal of R
/// measures each column's distance from the span of the columns before it,
/// so a vanishing entry both detects rank deficiency and names the collinear
/// column.
pub fn weighted_least_squares<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    weights: Option<&DVector<T>>,
    rank_tol: T,
) -> Result<DVector<T>> {
    let (n, p) = x.shape();
    debug_assert_eq!(y.len(), n);
    if n < p {
        return Err(Error::InvalidInput(format!(
            "least squares needs at least as many rows ({n}) as columns ({p})"
        )));
    }
    let (xs, ys) = match weights {
        Some(w) => {
            debug_assert_eq!(w.len(), n);
            let mut xs = x.clone();
            let mut ys = y.clone();
            for i in 0..n {
                let r = w[i].max(T::zero()).sqrt();
                for j in 0..p {
                    xs[(i, j)] *= r;
                }
                ys[i] *= r;
            }
            (xs, ys)
        }
        None => (x.clone(), y.clone()),
    };
    let qr = xs.qr();
    let r = qr.r();
    let dmax = r.diagonal().iter().copied().fold(T::zero(), |a, d| a.max(d.abs()));
    let columns: Vec<usize> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= dmax * rank_tol)
        .collect();
    if dmax == T::zero() || !columns.is_empty() {
        return Err(Error::RankDeficient { columns });
    }
    let rhs = qr.q().transpose() * ys;
    r.solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::SingularMatrix { context: "least squares solve".into() })
}

/// Outcome of a convex-hull membership query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HullMembership {
    Inside,
    Outside,
}

/// Test whether `target` lies in the convex hull of the rows of `points`
/// with a phase-1 simplex: minimize the total artificial mass needed to
/// write `target` as a convex combination of the rows. The optimum is zero
/// exactly when the point is a member; `tol` separates the two outcomes.
pub fn hull_membership<T: Scalar>(
    points: &DMatrix<T>,
    target: &DVector<T>,
    tol: T,
) -> HullMembership {
    let distance = hull_l1_distance(points, target);
    if distance <= tol {
        HullMembership::Inside
    } else {
        HullMembership::Outside
    }
}

/// Phase-1 simplex optimum: the minimal sum of artificial variables in
/// `points^T w + s = [target; 1]`, `w, s >= 0`. Zero iff `target` is in the
/// convex hull of the rows.
// Tableau pivoting is clearest with explicit row/column indices.
#[allow(clippy::needless_range_loop)]
pub fn hull_l1_distance<T: Scalar>(points: &DMatrix<T>, target: &DVector<T>) -> T {
    let n = points.nrows();
    let p = points.ncols();
    debug_assert_eq!(target.len(), p);
    let rows = p + 1;
    let cols = n + rows; // structural weights plus one artificial per row

    // Right-hand side, flipped nonnegative; the convexity row is w . 1 = 1.
    let mut b = vec![0.0f64; rows];
    for j in 0..p {
        b[j] = target[j].to_f64_lossy();
    }
    b[p] = 1.0;

    // Dense tableau in f64; the instances are small (rows = p + 1).
    let mut a = vec![vec![0.0f64; cols]; rows];
    for j in 0..p {
        for i in 0..n {
            a[j][i] = points[(i, j)].to_f64_lossy();
        }
    }
    for i in 0..n {
        a[p][i] = 1.0;
    }
    for r in 0..rows {
        if b[r] < 0.0 {
            b[r] = -b[r];
            for c in 0..n {
                a[r][c] = -a[r][c];
            }
        }
        a[r][n + r] = 1.0;
    }

    // Phase-1 objective: minimize the sum of artificials.
    let mut basis: Vec<usize> = (n..cols).collect();
    let mut cost = vec![0.0f64; cols];
    for c in n..cols {
        cost[c] = 1.0;
    }

    let eps = 1e-11;
    let max_pivots = 50 * (rows + n);
    for _ in 0..max_pivots {
        // Reduced costs: c_j - c_B B^-1 A_j, maintained implicitly because the
        // tableau is kept in canonical form by the pivots below.
        let mut entering = None;
        for c in 0..cols {
            if basis.contains(&c) {
                continue;
            }
            let mut reduced = cost[c];
            for (r, &bc) in basis.iter().enumerate() {
                reduced -= cost[bc] * a[r][c];
            }
            if reduced < -eps {
                entering = Some(c);
                break; // Bland's rule: first improving column
            }
        }
        let Some(enter) = entering else { break };
        // Ratio test, Bland tie-break on the leaving basic variable index.
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..rows {
            if a[r][enter] > eps {
                let ratio = b[r] / a[r][enter];
                let better = match leave {
                    None => true,
                    Some((lr, lratio)) => {
                        ratio < lratio - eps
                            || (ratio <= lratio + eps && basis[r] < basis[lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let Some((lr, _)) = leave else { break }; // unbounded cannot happen here
        // Pivot.
        let piv = a[lr][enter];
        for c in 0..cols {
            a[lr][c] /= piv;
        }
        b[lr] /= piv;
        for r in 0..rows {
            if r != lr && a[r][enter].abs() > 0.0 {
                let f = a[r][enter];
                for c in 0..cols {
                    a[r][c] -= f * a[lr][c];
                }
                b[r] -= f * b[lr];
            }
        }
        basis[lr] = enter;
    }

    let mut objective = 0.0f64;
    for (r, &bc) in basis.iter().enumerate() {
        if bc >= n {
            objective += b[r];
        }
    }
    T::of(objective.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
        let direct = ((-1.0f64).exp() + 1.0 + 1.0f64.exp()).ln();
        assert_abs_diff_eq!(log_sum_exp(&v), direct, epsilon = 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_inputs() {
        let v = DVector::from_vec(vec![1000.0, 1000.0]);
        assert_abs_diff_eq!(log_sum_exp(&v), 1000.0 + 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let v = DVector::from_vec(vec![0.0, 2.0, -3.0]);
        let w = softmax(&v);
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-15);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn hull_membership_interval() {
        let points = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let inside = DVector::from_vec(vec![0.5]);
        let outside = DVector::from_vec(vec![1.5]);
        assert_eq!(hull_membership(&points, &inside, 1e-9), HullMembership::Inside);
        assert_eq!(hull_membership(&points, &outside, 1e-9), HullMembership::Outside);
    }

    #[test]
    fn hull_membership_triangle() {
        let points = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            hull_membership(&points, &DVector::from_vec(vec![0.2, 0.2]), 1e-9),
            HullMembership::Inside
        );
        assert_eq!(
            hull_membership(&points, &DVector::from_vec(vec![0.9, 0.9]), 1e-9),
            HullMembership::Outside
        );
    }

    #[test]
    fn hull_distance_is_positive_outside() {
        let points = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let d = hull_l1_distance(&points, &DVector::from_vec(vec![1.5]));
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn spd_solve_with_jitter_fallback() {
        // Semidefinite matrix: plain Cholesky fails, jitter path succeeds.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let x = solve_spd(&a, &b, "test").unwrap();
        let r = &a * &x - &b;
        assert!(r.amax() < 1e-5);
    }
}
