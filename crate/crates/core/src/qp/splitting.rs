//! Operator-splitting fallback (ADMM on `l <= A v <= u`) followed by an
//! active-set polish.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{inf_norm, QpInstance, QpStatus, Tolerances};
use crate::scalar::Scalar;

/// Iterates beyond this magnitude are taken as a divergence certificate.
const DIVERGENCE: f64 = 1e12;

pub(crate) struct SplitOutcome<T: Scalar> {
    pub x: DVector<T>,
    pub eq_mult: DVector<T>,
    pub ineq_mult: DVector<T>,
    pub active: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

pub(crate) fn solve<T: Scalar>(
    qp: &QpInstance<T>,
    g: &DMatrix<T>,
    h: &DVector<T>,
    hess_chol: &Cholesky<T, Dyn>,
    tol: &Tolerances<T>,
    max_iter: usize,
) -> SplitOutcome<T> {
    let n = qp.dim();
    let p = qp.a_eq.nrows();
    let m = g.nrows();
    let rows = p + m;

    if rows == 0 {
        let x = -hess_chol.solve(&qp.linear);
        return SplitOutcome {
            x,
            eq_mult: DVector::zeros(0),
            ineq_mult: DVector::zeros(0),
            active: Vec::new(),
            status: QpStatus::Optimal,
            iterations: 0,
        };
    }

    let a = DMatrix::from_fn(rows, n, |r, c| if r < p { qp.a_eq[(r, c)] } else { g[(r - p, c)] });
    let lower: Vec<T> = (0..rows).map(|r| if r < p { qp.b_eq[r] } else { -T::infinity() }).collect();
    let upper: Vec<T> = (0..rows).map(|r| if r < p { qp.b_eq[r] } else { h[r - p] }).collect();

    let rho = T::lit(0.1);
    let rho_vec = DVector::from_fn(rows, |r, _| if r < p { rho * T::lit(1e3) } else { rho });
    let sigma = T::lit(1e-6);
    let alpha = T::lit(1.6);

    let mut kkt = &qp.hessian + a.tr_mul(&DMatrix::from_diagonal(&rho_vec)) * &a;
    for i in 0..n {
        kkt[(i, i)] += sigma;
    }
    let Some(factor) = kkt.cholesky() else {
        return stalled(n, p, m, 0);
    };

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(rows);
    let mut y = DVector::zeros(rows);
    let eps = tol.primal.min(tol.stationarity) * T::lit(0.1);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let rhs = &x * sigma - &qp.linear + a.tr_mul(&(rho_vec.component_mul(&z) - &y));
        let x_tilde = factor.solve(&rhs);
        let z_tilde = &a * &x_tilde;
        x = &x_tilde * alpha + &x * (T::one() - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (T::one() - alpha);
        let z_new = DVector::from_fn(rows, |r, _| {
            let v = z_relaxed[r] + y[r] / rho_vec[r];
            v.max(lower[r]).min(upper[r])
        });
        y += (z_relaxed - &z_new).component_mul(&rho_vec);
        z = z_new;

        if inf_norm(&x) > T::lit(DIVERGENCE) || inf_norm(&y) > T::lit(DIVERGENCE) {
            return SplitOutcome {
                x,
                eq_mult: DVector::zeros(p),
                ineq_mult: DVector::zeros(m),
                active: Vec::new(),
                status: QpStatus::Infeasible,
                iterations,
            };
        }
        if iterations % 10 == 0 {
            let r_prim = inf_norm(&(&a * &x - &z));
            let r_dual = inf_norm(&(&qp.hessian * &x + &qp.linear + a.tr_mul(&y)));
            if r_prim <= eps && r_dual <= eps {
                converged = true;
                break;
            }
        }
    }

    // Polish on the rows the splitting iterate marks active.
    let active_rows: Vec<usize> = (0..rows)
        .filter(|&r| r < p || y[r] > T::lit(1e-9) || (upper[r] - z[r]).abs() <= T::lit(1e-9))
        .collect();
    if let Some(polished) = polish(qp, &a, &upper, &active_rows, p, m) {
        return SplitOutcome { iterations, ..polished };
    }
    if !converged {
        return stalled(n, p, m, iterations);
    }
    let eq_mult = DVector::from_fn(p, |r, _| y[r]);
    let ineq_mult = DVector::from_fn(m, |r, _| y[p + r].max(T::zero()));
    let active = (0..m).filter(|&r| ineq_mult[r] > T::zero()).collect();
    SplitOutcome {
        x,
        eq_mult,
        ineq_mult,
        active,
        status: QpStatus::Optimal,
        iterations,
    }
}

fn polish<T: Scalar>(
    qp: &QpInstance<T>,
    a: &DMatrix<T>,
    upper: &[T],
    active: &[usize],
    p: usize,
    m: usize,
) -> Option<SplitOutcome<T>> {
    let n = qp.dim();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
    for (c, &r) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(j, n + c)] = a[(r, j)];
            kkt[(n + c, j)] = a[(r, j)];
        }
    }
    let mut rhs = DVector::zeros(n + k);
    for j in 0..n {
        rhs[j] = -qp.linear[j];
    }
    for (c, &r) in active.iter().enumerate() {
        rhs[n + c] = upper[r];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = DVector::from_fn(n, |i, _| sol[i]);
    let mut eq_mult = DVector::zeros(p);
    let mut ineq_mult = DVector::zeros(m);
    for (c, &r) in active.iter().enumerate() {
        if r < p {
            eq_mult[r] = sol[n + c];
        } else {
            ineq_mult[r - p] = sol[n + c];
        }
    }
    Some(SplitOutcome {
        x,
        eq_mult,
        ineq_mult,
        active: active.iter().filter(|&&r| r >= p).map(|&r| r - p).collect(),
        status: QpStatus::Optimal,
        iterations: 0,
    })
}

fn stalled<T: Scalar>(n: usize, p: usize, m: usize, iterations: usize) -> SplitOutcome<T> {
    SplitOutcome {
        x: DVector::zeros(n),
        eq_mult: DVector::zeros(p),
        ineq_mult: DVector::zeros(m),
        active: Vec::new(),
        status: QpStatus::MaxIterations,
        iterations,
    }
}
