//! Independent reference for dense strictly convex QPs: accelerated
//! projected gradient ascent on the dual with gradient restarts.

use nalgebra::{DMatrix, DVector};
use noir_mpc::qp::QpInstance;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct OracleResult {
    pub x: DVector<f64>,
    pub iterations: usize,
}

/// Dual FISTA until the primal iterate moves less than `tol` and is feasible to `tol`.
pub fn dual_projected_gradient(qp: &QpInstance<f64>, tol: f64, max_iter: usize) -> OracleResult {
    let n = qp.dim();
    let (g, h) = qp.stacked_inequalities();
    let p = qp.a_eq.nrows();
    let m = g.nrows();
    let rows = p + m;
    let c = DMatrix::from_fn(rows, n, |r, j| if r < p { qp.a_eq[(r, j)] } else { g[(r - p, j)] });
    let d = DVector::from_fn(rows, |r, _| if r < p { qp.b_eq[r] } else { h[r - p] });
    let hinv = qp.hessian.clone().try_inverse().expect("hessian invertible");
    let primal = |y: &DVector<f64>| -(&hinv * (&qp.linear + c.tr_mul(y)));
    if rows == 0 {
        return OracleResult { x: primal(&DVector::zeros(0)), iterations: 0 };
    }
    let dual_hess = &c * &hinv * c.transpose();
    let lipschitz = dual_hess.symmetric_eigenvalues().amax().max(1e-12);
    let step = 1.0 / lipschitz;
    let project = |y: &mut DVector<f64>| {
        for r in p..rows {
            y[r] = y[r].max(0.0);
        }
    };

    let mut y = DVector::zeros(rows);
    let mut w = y.clone();
    let mut t = 1.0f64;
    let mut x = primal(&y);
    for it in 1..=max_iter {
        let xw = primal(&w);
        let grad = &c * &xw - &d;
        let mut y_next = &w + grad * step;
        project(&mut y_next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let diff = &y_next - &y;
        // Restart momentum when it points against the ascent direction.
        let restart = (&w - &y_next).dot(&diff) > 0.0;
        w = if restart { y_next.clone() } else { &y_next + &diff * ((t - 1.0) / t_next) };
        t = if restart { 1.0 } else { t_next };
        y = y_next;
        let x_next = primal(&y);
        let moved = (&x_next - &x).amax();
        x = x_next;
        if it % 50 == 0 && moved < tol * 1e-2 {
            let resid = &c * &x - &d;
            let infeas = (0..rows).fold(0.0f64, |acc, r| if r < p { acc.max(resid[r].abs()) } else { acc.max(resid[r]) });
            let comp = (p..rows).fold(0.0f64, |acc, r| acc.max((y[r] * resid[r]).abs()));
            if infeas < tol && comp < tol {
                return OracleResult { x, iterations: it };
            }
        }
    }
    OracleResult { x, iterations: max_iter }
}

/// Random strictly convex QP with a known strictly feasible interior point.
pub fn random_feasible_qp(rng: &mut ChaCha8Rng, n: usize, m_in: usize, m_eq: usize, bounds: bool) -> QpInstance<f64> {
    let normal = |r: &mut ChaCha8Rng| r.gen_range(-1.0..1.0);
    let mfac = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let hessian = mfac.tr_mul(&mfac) + DMatrix::identity(n, n) * 0.5;
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let linear = DVector::from_fn(n, |_, _| normal(rng) * 5.0);
    let interior = DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0));
    let a_in = DMatrix::from_fn(m_in, n, |_, _| normal(rng));
    let b_in = &a_in * &interior + DVector::from_fn(m_in, |_, _| rng.gen_range(0.0..0.5));
    let a_eq = DMatrix::from_fn(m_eq, n, |_, _| normal(rng));
    let b_eq = &a_eq * &interior;
    let mut qp = QpInstance::new(hessian, linear)
        .with_inequalities(a_in, b_in)
        .with_equalities(a_eq, b_eq);
    if bounds {
        qp = qp.with_lower(DVector::zeros(n)).with_upper(DVector::from_element(n, 2.0));
    }
    qp
}
