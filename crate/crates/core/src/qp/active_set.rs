//! Dual active-set solver (Goldfarb-Idnani) with warm starts.
//!
//! Starts from the unconstrained minimizer and adds violated constraints one
//! at a time, dropping constraints whose multipliers would turn negative.
//! Every iterate is dual feasible; the first primal feasible iterate is
//! optimal. The factorization `J = L^{-T} Q`, `R` is updated with Givens
//! rotations so each add or drop costs `O(n^2)`.

use nalgebra::{DMatrix, DVector};

use super::{kkt_with_multipliers, splitting, QpError, QpInstance, QpSolution, QpStatus, Tolerances};
use crate::scalar::Scalar;

/// Reusable solver holding the previous active set for warm starts.
#[derive(Debug, Clone)]
pub struct QpSolver<T: Scalar> {
    tol: Tolerances<T>,
    max_iter: usize,
    warm: Vec<usize>,
}

impl<T: Scalar> QpSolver<T> {
    pub fn new(tol: Tolerances<T>, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            warm: Vec::new(),
        }
    }

    pub fn tolerances(&self) -> &Tolerances<T> {
        &self.tol
    }

    /// Stacked inequality rows tried first on the next solve.
    pub fn warm_start(&self) -> &[usize] {
        &self.warm
    }

    pub fn set_warm_start(&mut self, active: Vec<usize>) {
        self.warm = active;
    }

    pub fn clear_warm_start(&mut self) {
        self.warm.clear();
    }

    pub fn solve(&mut self, qp: &QpInstance<T>) -> Result<QpSolution<T>, QpError> {
        qp.validate()?;
        let n = qp.dim();
        let sym = (&qp.hessian + qp.hessian.transpose()) * T::lit(0.5);
        let min_eig = sym.clone().symmetric_eigenvalues().min();
        if !(min_eig >= T::lit(1e-8)) {
            return Err(QpError::NotPositiveDefinite(min_eig.as_f64()));
        }
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(QpError::NotPositiveDefinite(min_eig.as_f64()))?;

        let (g, h) = qp.stacked_inequalities();
        let system = ConstraintSystem::normalize(qp, &g, &h);
        let p_eq = qp.a_eq.nrows();
        let mut eq_mult = DVector::zeros(p_eq);
        let mut ineq_mult = DVector::zeros(h.len());

        if system.inconsistent_zero_row {
            return Ok(self.finish_infeasible(qp, n, p_eq, h.len(), 0));
        }

        let warm: Vec<usize> = self
            .warm
            .iter()
            .filter_map(|&row| system.ineq_col.get(row).copied().flatten())
            .collect();
        let x0 = -chol.solve(&qp.linear);
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite(min_eig.as_f64()))?;
        let mut gi = DualActiveSet::new(l_inv.transpose(), x0, &system, self.max_iter);
        let outcome = gi.run(&warm);
        let iterations = gi.iterations;

        let consistent = system.dropped_eq.iter().all(|&row| {
            (qp.a_eq.row(row).transpose().dot(&gi.x) - qp.b_eq[row]).abs() <= self.tol.primal
        });

        if outcome == Outcome::Infeasible || (outcome == Outcome::Optimal && !consistent) {
            return Ok(self.finish_infeasible(qp, n, p_eq, h.len(), iterations));
        }

        for slot in 0..gi.iq {
            let col = gi.active[slot];
            let u = gi.u[slot];
            match system.origin[col] {
                Origin::Eq(row) => eq_mult[row] = -u / system.scale[col],
                Origin::Ineq(row) => ineq_mult[row] = u / system.scale[col],
            }
        }
        let x = gi.x.clone();
        let kkt = kkt_with_multipliers(qp, &x, &eq_mult, &ineq_mult);
        let mut active: Vec<usize> = (0..gi.iq)
            .filter_map(|s| match system.origin[gi.active[s]] {
                Origin::Ineq(row) => Some(row),
                Origin::Eq(_) => None,
            })
            .collect();
        active.sort_unstable();

        if outcome == Outcome::Optimal && kkt.within(&self.tol) {
            self.warm = active.clone();
            return Ok(QpSolution {
                objective: qp.objective(&x),
                x,
                status: QpStatus::Optimal,
                kkt,
                iterations,
                eq_multipliers: eq_mult,
                ineq_multipliers: ineq_mult,
                active,
                used_fallback: false,
            });
        }

        log::debug!(
            "active-set ended with {:?} (kkt max {:e}); trying splitting fallback",
            outcome,
            kkt.max().as_f64()
        );
        let fallback = splitting::solve(qp, &g, &h, &chol, &self.tol, 50_000);
        let fb_kkt = kkt_with_multipliers(qp, &fallback.x, &fallback.eq_mult, &fallback.ineq_mult);
        let status = match fallback.status {
            QpStatus::Optimal if fb_kkt.within(&self.tol) => QpStatus::Optimal,
            QpStatus::Infeasible => QpStatus::Infeasible,
            _ => QpStatus::MaxIterations,
        };
        if status == QpStatus::Optimal {
            self.warm = fallback.active.clone();
        }
        Ok(QpSolution {
            objective: qp.objective(&fallback.x),
            x: fallback.x,
            status,
            kkt: fb_kkt,
            iterations: iterations + fallback.iterations,
            eq_multipliers: fallback.eq_mult,
            ineq_multipliers: fallback.ineq_mult,
            active: fallback.active,
            used_fallback: true,
        })
    }

    fn finish_infeasible(&mut self, qp: &QpInstance<T>, n: usize, p: usize, m: usize, iterations: usize) -> QpSolution<T> {
        self.warm.clear();
        let x = DVector::zeros(n);
        let eq = DVector::zeros(p);
        let ineq = DVector::zeros(m);
        QpSolution {
            objective: qp.objective(&x),
            kkt: kkt_with_multipliers(qp, &x, &eq, &ineq),
            x,
            status: QpStatus::Infeasible,
            iterations,
            eq_multipliers: eq,
            ineq_multipliers: ineq,
            active: Vec::new(),
            used_fallback: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Origin {
    Eq(usize),
    Ineq(usize),
}

/// Constraints as unit normals in `c' x >= d` form; equalities first.
struct ConstraintSystem<T: Scalar> {
    normals: DMatrix<T>,
    rhs: DVector<T>,
    scale: Vec<T>,
    origin: Vec<Origin>,
    p: usize,
    /// Stacked row -> internal column, `None` for dropped zero rows.
    ineq_col: Vec<Option<usize>>,
    dropped_eq: Vec<usize>,
    inconsistent_zero_row: bool,
}

impl<T: Scalar> ConstraintSystem<T> {
    fn normalize(qp: &QpInstance<T>, g: &DMatrix<T>, h: &DVector<T>) -> Self {
        let n = qp.dim();
        let zero_tol = T::lit(1e-14);
        let mut cols: Vec<DVector<T>> = Vec::new();
        let mut rhs = Vec::new();
        let mut scale = Vec::new();
        let mut origin = Vec::new();
        let mut dropped_eq = Vec::new();
        let mut inconsistent = false;

        // Equalities: keep a linearly independent subset, checked by Gram-Schmidt.
        let mut basis: Vec<DVector<T>> = Vec::new();
        let dep_tol = T::lit(1e-9);
        for r in 0..qp.a_eq.nrows() {
            let row = qp.a_eq.row(r).transpose();
            let norm = row.norm();
            if norm <= zero_tol {
                if qp.b_eq[r].abs() > T::lit(1e-12) {
                    inconsistent = true;
                }
                continue;
            }
            let unit = &row / norm;
            let mut resid = unit.clone();
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&resid);
                    resid.axpy(-c, q, T::one());
                }
            }
            let rn = resid.norm();
            if rn <= dep_tol {
                dropped_eq.push(r);
                continue;
            }
            basis.push(resid / rn);
            cols.push(unit);
            rhs.push(qp.b_eq[r] / norm);
            scale.push(norm);
            origin.push(Origin::Eq(r));
        }
        let p = cols.len();

        let mut ineq_col = vec![None; h.len()];
        for r in 0..h.len() {
            let row = g.row(r).transpose();
            let norm = row.norm();
            if norm <= zero_tol {
                // 0 <= h_r
                if h[r] < -T::lit(1e-12) {
                    inconsistent = true;
                }
                continue;
            }
            ineq_col[r] = Some(cols.len());
            cols.push(-row / norm);
            rhs.push(-h[r] / norm);
            scale.push(norm);
            origin.push(Origin::Ineq(r));
        }
        let normals = if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Self {
            normals,
            rhs: DVector::from_vec(rhs),
            scale,
            origin,
            p,
            ineq_col,
            dropped_eq,
            inconsistent_zero_row: inconsistent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Optimal,
    Infeasible,
    MaxIterations,
}

struct DualActiveSet<'a, T: Scalar> {
    n: usize,
    j: DMatrix<T>,
    r: DMatrix<T>,
    r_norm: T,
    x: DVector<T>,
    iq: usize,
    active: Vec<usize>,
    u: Vec<T>,
    sys: &'a ConstraintSystem<T>,
    max_iter: usize,
    iterations: usize,
    dep_tol: T,
    feas_tol: T,
}

impl<'a, T: Scalar> DualActiveSet<'a, T> {
    fn new(j: DMatrix<T>, x: DVector<T>, sys: &'a ConstraintSystem<T>, max_iter: usize) -> Self {
        let n = x.len();
        Self {
            n,
            j,
            r: DMatrix::zeros(n, n),
            r_norm: T::one(),
            x,
            iq: 0,
            active: vec![0; n + 1],
            u: vec![T::zero(); n + 1],
            sys,
            max_iter,
            iterations: 0,
            dep_tol: T::epsilon().sqrt() * T::lit(1e-3),
            feas_tol: T::epsilon().sqrt() * T::lit(1e-4),
        }
    }

    fn slack(&self, col: usize) -> T {
        self.sys.normals.column(col).dot(&self.x) - self.sys.rhs[col]
    }

    fn violation_tol(&self, col: usize) -> T {
        self.feas_tol * (T::one() + self.sys.rhs[col].abs())
    }

    /// `d = J' n`, `z = J2 d2`, `r = R^{-1} d1`.
    fn directions(&self, np: &DVector<T>) -> (DVector<T>, DVector<T>, DVector<T>) {
        let d = self.j.tr_mul(np);
        let mut z = DVector::zeros(self.n);
        for k in self.iq..self.n {
            z.axpy(d[k], &self.j.column(k), T::one());
        }
        let mut r = DVector::zeros(self.iq);
        for i in (0..self.iq).rev() {
            let mut sum = d[i];
            for k in (i + 1)..self.iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        (d, z, r)
    }

    fn is_dependent(&self, d: &DVector<T>) -> bool {
        let tail: T = (self.iq..self.n).map(|k| d[k] * d[k]).fold(T::zero(), |a, b| a + b);
        tail.sqrt() <= self.dep_tol * d.norm()
    }

    fn add_constraint(&mut self, mut d: DVector<T>) -> bool {
        let n = self.n;
        let mut jj = n;
        while jj > self.iq + 1 {
            let j = jj - 1;
            let mut cc = d[j - 1];
            let mut ss = d[j];
            let h = cc.hypot(ss);
            jj -= 1;
            if h == T::zero() {
                continue;
            }
            d[j] = T::zero();
            ss /= h;
            cc /= h;
            if cc < T::zero() {
                cc = -cc;
                ss = -ss;
                d[j - 1] = -h;
            } else {
                d[j - 1] = h;
            }
            let xny = ss / (T::one() + cc);
            for k in 0..n {
                let t1 = self.j[(k, j - 1)];
                let t2 = self.j[(k, j)];
                let new = t1 * cc + t2 * ss;
                self.j[(k, j - 1)] = new;
                self.j[(k, j)] = xny * (t1 + new) - t2;
            }
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[(i, self.iq - 1)] = d[i];
        }
        let diag = d[self.iq - 1].abs();
        if diag <= T::epsilon() * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    fn delete_constraint(&mut self, col: usize) {
        let n = self.n;
        let Some(qq) = (self.sys.p..self.iq).find(|&s| self.active[s] == col) else {
            return;
        };
        for i in qq..self.iq - 1 {
            self.active[i] = self.active[i + 1];
            self.u[i] = self.u[i + 1];
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        self.active[self.iq - 1] = self.active[self.iq];
        self.u[self.iq - 1] = self.u[self.iq];
        self.active[self.iq] = 0;
        self.u[self.iq] = T::zero();
        for k in 0..self.iq {
            self.r[(k, self.iq - 1)] = T::zero();
        }
        self.iq -= 1;
        if self.iq == 0 {
            return;
        }
        for j in qq..self.iq {
            let mut cc = self.r[(j, j)];
            let mut ss = self.r[(j + 1, j)];
            let h = cc.hypot(ss);
            if h == T::zero() {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(j + 1, j)] = T::zero();
            if cc < T::zero() {
                self.r[(j, j)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(j, j)] = h;
            }
            let xny = ss / (T::one() + cc);
            for k in (j + 1)..self.iq {
                let t1 = self.r[(j, k)];
                let t2 = self.r[(j + 1, k)];
                let new = t1 * cc + t2 * ss;
                self.r[(j, k)] = new;
                self.r[(j + 1, k)] = xny * (t1 + new) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, j)];
                let t2 = self.j[(k, j + 1)];
                let new = t1 * cc + t2 * ss;
                self.j[(k, j)] = new;
                self.j[(k, j + 1)] = xny * (new + t1) - t2;
            }
        }
    }

    fn run(&mut self, warm: &[usize]) -> Outcome {
        let sys = self.sys;
        let m = sys.normals.ncols();

        for col in 0..sys.p {
            let np = sys.normals.column(col).into_owned();
            let (d, z, r) = self.directions(&np);
            let s = self.slack(col);
            if self.is_dependent(&d) {
                if s.abs() > self.violation_tol(col) {
                    return Outcome::Infeasible;
                }
                continue;
            }
            let t2 = -s / z.dot(&np);
            self.x.axpy(t2, &z, T::one());
            self.u[self.iq] = t2;
            for k in 0..self.iq {
                self.u[k] -= t2 * r[k];
            }
            self.active[self.iq] = col;
            if !self.add_constraint(d) {
                return Outcome::Infeasible;
            }
        }

        let mut is_active = vec![false; m];
        for s in 0..self.iq {
            is_active[self.active[s]] = true;
        }
        let mut excluded = vec![false; m];
        let mut warm_mask = vec![false; m];
        for &c in warm {
            warm_mask[c] = true;
        }

        loop {
            // Select the most violated inactive constraint, warm-start rows first.
            self.iterations += 1;
            if self.iterations > self.max_iter {
                return Outcome::MaxIterations;
            }
            let x_old = self.x.clone();
            let active_old = self.active.clone();
            let u_old = self.u.clone();
            let iq_old = self.iq;

            let mut best: Option<(usize, T)> = None;
            let mut best_warm: Option<(usize, T)> = None;
            for col in sys.p..m {
                if is_active[col] || excluded[col] {
                    continue;
                }
                let s = self.slack(col);
                if s >= -self.violation_tol(col) {
                    continue;
                }
                if best.is_none_or(|(_, bs)| s < bs) {
                    best = Some((col, s));
                }
                if warm_mask[col] && best_warm.is_none_or(|(_, bs)| s < bs) {
                    best_warm = Some((col, s));
                }
            }
            let Some((ip, _)) = best_warm.or(best) else {
                return Outcome::Optimal;
            };
            let np = sys.normals.column(ip).into_owned();
            self.u[self.iq] = T::zero();
            self.active[self.iq] = ip;

            loop {
                self.iterations += 1;
                if self.iterations > self.max_iter {
                    return Outcome::MaxIterations;
                }
                let (d, z, r) = self.directions(&np);
                let s_ip = self.slack(ip);

                let mut t1 = T::infinity();
                let mut drop: Option<usize> = None;
                for k in sys.p..self.iq {
                    if r[k] > T::zero() {
                        let ratio = self.u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(self.active[k]);
                        }
                    }
                }
                let full = if self.is_dependent(&d) {
                    None
                } else {
                    Some(-s_ip / z.dot(&np))
                };

                match (full, drop) {
                    (None, None) => return Outcome::Infeasible,
                    (None, Some(l)) => {
                        // Dual step only.
                        for k in 0..self.iq {
                            self.u[k] -= t1 * r[k];
                        }
                        self.u[self.iq] += t1;
                        is_active[l] = false;
                        self.delete_constraint(l);
                    }
                    (Some(t2), _) => {
                        let t = t1.min(t2);
                        self.x.axpy(t, &z, T::one());
                        for k in 0..self.iq {
                            self.u[k] -= t * r[k];
                        }
                        self.u[self.iq] += t;
                        if t2 <= t1 {
                            if self.add_constraint(d) {
                                is_active[ip] = true;
                            } else {
                                // Degenerate: restore and skip this row for now.
                                excluded[ip] = true;
                                self.x = x_old;
                                self.active = active_old;
                                self.u = u_old;
                                self.iq = iq_old;
                                self.rebuild_factors();
                                is_active.iter_mut().for_each(|a| *a = false);
                                for s in 0..self.iq {
                                    is_active[self.active[s]] = true;
                                }
                            }
                            break;
                        }
                        let l = drop.expect("partial step has a blocking constraint");
                        is_active[l] = false;
                        self.delete_constraint(l);
                    }
                }
            }
        }
    }

    /// Recomputes `J` and `R` from scratch for the current active slots.
    fn rebuild_factors(&mut self) {
        let n = self.n;
        // J = L^{-T} Q with Q from a QR of L^{-1} N; reconstruct by re-adding.
        let base = self.base_j();
        self.j = base;
        self.r = DMatrix::zeros(n, n);
        self.r_norm = T::one();
        let slots: Vec<usize> = self.active[..self.iq].to_vec();
        self.iq = 0;
        for col in slots {
            let np = self.sys.normals.column(col).into_owned();
            let d = self.j.tr_mul(&np);
            self.active[self.iq] = col;
            self.add_constraint(d);
        }
    }

    fn base_j(&self) -> DMatrix<T> {
        // J J' = H^{-1} is invariant under the orthogonal updates, and any
        // factor with that property is a valid restart point.
        let hinv = &self.j * self.j.transpose();
        let chol = hinv.cholesky().expect("inverse hessian stays positive definite");
        chol.l()
    }
}
