//! Dense strictly convex quadratic programs.
//!
//! ```text
//!     minimize    1/2 v' H v + f' v
//!     subject to  A_eq v  = b_eq
//!                 A_in v <= b_in
//!                 lower <= v <= upper
//! ```
//!
//! Inequalities and finite bounds are stacked into a single `G v <= h` system
//! in the order `[A_in; -I (lower); I (upper)]`; multipliers and active-set
//! indices refer to that order.

mod active_set;
mod splitting;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Scalar;

pub use active_set::QpSolver;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("hessian is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance<T: Scalar> {
    pub hessian: DMatrix<T>,
    pub linear: DVector<T>,
    pub a_in: DMatrix<T>,
    pub b_in: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub lower: Option<DVector<T>>,
    pub upper: Option<DVector<T>>,
}

impl<T: Scalar> QpInstance<T> {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(hessian: DMatrix<T>, linear: DVector<T>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            lower: None,
            upper: None,
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<T>, b: DVector<T>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<T>, b: DVector<T>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_lower(mut self, lower: DVector<T>) -> Self {
        self.lower = Some(lower);
        self
    }

    pub fn with_upper(mut self, upper: DVector<T>) -> Self {
        self.upper = Some(upper);
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let dim = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.hessian.shape() != (n, n) {
            return dim("hessian must be n x n");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return dim("inequality block");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return dim("equality block");
        }
        if self.lower.as_ref().is_some_and(|l| l.len() != n) || self.upper.as_ref().is_some_and(|u| u.len() != n) {
            return dim("bounds");
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        let scale = self.hessian.amax().max(T::one());
        if asym > T::lit(1e-10) * scale {
            return Err(QpError::NotSymmetric(asym.as_f64()));
        }
        Ok(())
    }

    /// `1/2 v' H v + f' v`.
    pub fn objective(&self, v: &DVector<T>) -> T {
        (&self.hessian * v).dot(v) * T::lit(0.5) + self.linear.dot(v)
    }

    /// Stacked `G v <= h` system (inequalities, then finite lower, then finite upper bounds).
    pub fn stacked_inequalities(&self) -> (DMatrix<T>, DVector<T>) {
        let n = self.dim();
        let mut rows: Vec<(DVector<T>, T)> = Vec::new();
        for r in 0..self.a_in.nrows() {
            rows.push((self.a_in.row(r).transpose(), self.b_in[r]));
        }
        if let Some(l) = &self.lower {
            for i in 0..n {
                if l[i].is_finite() {
                    let mut e = DVector::zeros(n);
                    e[i] = -T::one();
                    rows.push((e, -l[i]));
                }
            }
        }
        if let Some(u) = &self.upper {
            for i in 0..n {
                if u[i].is_finite() {
                    let mut e = DVector::zeros(n);
                    e[i] = T::one();
                    rows.push((e, u[i]));
                }
            }
        }
        let g = DMatrix::from_fn(rows.len(), n, |r, c| rows[r].0[c]);
        let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        (g, h)
    }
}

/// Residual tolerances an optimal point must meet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances<T> {
    pub primal: T,
    pub stationarity: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Scalar> Default for Tolerances<T> {
    fn default() -> Self {
        let t = T::lit(1e-7);
        Self {
            primal: t,
            stationarity: t,
            dual: t,
            complementarity: t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// Infinity norms of the four KKT conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals<T> {
    pub stationarity: T,
    pub primal: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Scalar> KktResiduals<T> {
    pub fn within(&self, tol: &Tolerances<T>) -> bool {
        self.stationarity <= tol.stationarity
            && self.primal <= tol.primal
            && self.dual <= tol.dual
            && self.complementarity <= tol.complementarity
    }

    pub fn max(&self) -> T {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Scalar> {
    pub x: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub kkt: KktResiduals<T>,
    pub iterations: usize,
    /// Multipliers of `A_eq v = b_eq`.
    pub eq_multipliers: DVector<T>,
    /// Multipliers of the stacked `G v <= h` rows.
    pub ineq_multipliers: DVector<T>,
    /// Active stacked rows at termination, ascending.
    pub active: Vec<usize>,
    /// Whether the splitting fallback produced the answer.
    pub used_fallback: bool,
}

/// One-shot solve with a fresh solver instance.
pub fn solve<T: Scalar>(qp: &QpInstance<T>, tol: Tolerances<T>, max_iter: usize) -> Result<QpSolution<T>, QpError> {
    QpSolver::new(tol, max_iter).solve(qp)
}

/// KKT residuals at `v` with the supplied multipliers.
pub fn kkt_with_multipliers<T: Scalar>(
    qp: &QpInstance<T>,
    v: &DVector<T>,
    eq_mult: &DVector<T>,
    ineq_mult: &DVector<T>,
) -> KktResiduals<T> {
    let (g, h) = qp.stacked_inequalities();
    let grad = &qp.hessian * v + &qp.linear + qp.a_eq.tr_mul(eq_mult) + g.tr_mul(ineq_mult);
    let slack = &h - &g * v;
    let primal = primal_violation(qp, v, &g, &h);
    let dual = ineq_mult.iter().fold(T::zero(), |m, &l| m.max(-l));
    let complementarity = ineq_mult
        .iter()
        .zip(slack.iter())
        .fold(T::zero(), |m, (&l, &s)| m.max((l * s).abs()));
    KktResiduals {
        stationarity: inf_norm(&grad),
        primal,
        dual,
        complementarity,
    }
}

/// KKT residuals at `v` using least-squares multipliers on the rows within
/// `active_tol` of their bound.
pub fn kkt_residuals<T: Scalar>(qp: &QpInstance<T>, v: &DVector<T>) -> KktResiduals<T> {
    kkt_residuals_with_active_tol(qp, v, T::lit(1e-7))
}

pub fn kkt_residuals_with_active_tol<T: Scalar>(qp: &QpInstance<T>, v: &DVector<T>, active_tol: T) -> KktResiduals<T> {
    let n = qp.dim();
    let (g, h) = qp.stacked_inequalities();
    let slack = &h - &g * v;
    let active: Vec<usize> = (0..h.len()).filter(|&r| slack[r] <= active_tol).collect();
    let p = qp.a_eq.nrows();
    let cols = p + active.len();
    let grad = &qp.hessian * v + &qp.linear;

    let mut eq_mult = DVector::zeros(p);
    let mut ineq_mult = DVector::zeros(h.len());
    if cols > 0 {
        let m = DMatrix::from_fn(n, cols, |r, c| if c < p { qp.a_eq[(c, r)] } else { g[(active[c - p], r)] });
        let svd = m.svd(true, true);
        let tol = T::epsilon() * T::lit(n.max(cols) as f64) * svd.singular_values.max().max(T::one());
        if let Ok(y) = svd.solve(&(-&grad), tol) {
            for c in 0..p {
                eq_mult[c] = y[c];
            }
            for (c, &r) in active.iter().enumerate() {
                ineq_mult[r] = y[p + c];
            }
        }
    }
    kkt_with_multipliers(qp, v, &eq_mult, &ineq_mult)
}

fn primal_violation<T: Scalar>(qp: &QpInstance<T>, v: &DVector<T>, g: &DMatrix<T>, h: &DVector<T>) -> T {
    let eq = if qp.a_eq.nrows() > 0 {
        inf_norm(&(&qp.a_eq * v - &qp.b_eq))
    } else {
        T::zero()
    };
    let ineq = (g * v - h).iter().fold(T::zero(), |m, &r| m.max(r));
    eq.max(ineq)
}

pub(crate) fn inf_norm<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}
