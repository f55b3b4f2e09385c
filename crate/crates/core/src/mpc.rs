//! Receding-horizon controller over one full NOIR cycle.
//!
//! With `n_c` the cycle length, the decision vector `U` stacks
//! `u[k], ..., u[k + n_c - 1]` and the predicted states
//! `X = G1 x[k] + G2 U` stack `x[k + 1], ..., x[k + n_c]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{FdProfile, InputMatrix, PhaseMatrices, TrafficState};
use crate::network::{PhaseSchedule, RoadId, RoadNetwork};
use crate::qp::{QpError, QpInstance, QpSolution, QpSolver, QpStatus, Tolerances};
use crate::scalar::Scalar;

/// Slack allowed on the current state before declaring it out of range.
const STATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("density weight beta must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("net inflow u0 must be non-negative, got {0}")]
    NegativeNetInflow(f64),
    #[error("current density of road {road} is {value}, outside [0, {max}]")]
    InfeasibleAtCurrentState { road: RoadId, value: f64, max: f64 },
    #[error("horizon QP at k = {k} is infeasible")]
    QpInfeasible { k: usize },
    #[error("horizon QP at k = {k} hit the iteration limit ({iterations})")]
    QpMaxIterations { k: usize, iterations: usize },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Stacked prediction matrices for the horizon starting at `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPrediction<T: Scalar> {
    pub g1: DMatrix<T>,
    pub g2: DMatrix<T>,
    /// `H_0 = I, H_1, ..., H_{n_c}`.
    pub h_list: Vec<DMatrix<T>>,
    pub zeta: usize,
}

impl<T: Scalar> HorizonPrediction<T> {
    pub fn horizon(&self) -> usize {
        self.h_list.len() - 1
    }

    pub fn states(&self) -> usize {
        self.g1.ncols()
    }

    pub fn inputs(&self) -> usize {
        self.g2.ncols() / self.horizon()
    }

    /// `G1 x + G2 U`.
    pub fn predict(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.g1 * x + &self.g2 * u
    }
}

fn check_phase_table<T: Scalar>(schedule: &PhaseSchedule, phases: &[PhaseMatrices<T>]) -> Result<(), MpcError> {
    if phases.len() != schedule.cycle_length() {
        return Err(MpcError::Dimension(format!(
            "{} phase matrices for a cycle of length {}",
            phases.len(),
            schedule.cycle_length()
        )));
    }
    Ok(())
}

/// Builds `G1`, `G2` and the transition products for the horizon starting at `k`.
///
/// `phases[z]` holds the matrices of NOIR phase `z`.
pub fn build_prediction<T: Scalar>(
    schedule: &PhaseSchedule,
    phases: &[PhaseMatrices<T>],
    input: &InputMatrix<T>,
    k: usize,
) -> Result<HorizonPrediction<T>, MpcError> {
    check_phase_table(schedule, phases)?;
    let nc = schedule.cycle_length();
    let n = phases[0].dim();
    let m = input.inputs();
    let b = input.matrix();
    if b.nrows() != n {
        return Err(MpcError::Dimension(format!("input matrix has {} rows, state has {n}", b.nrows())));
    }
    let a_at = |t: usize| phases[t % nc].a();

    let mut h_list = Vec::with_capacity(nc + 1);
    h_list.push(DMatrix::identity(n, n));
    for i in 1..=nc {
        let next = a_at(k + i - 1) * &h_list[i - 1];
        h_list.push(next);
    }

    let mut g1 = DMatrix::zeros(n * nc, n);
    for i in 1..=nc {
        g1.view_mut(((i - 1) * n, 0), (n, n)).copy_from(&h_list[i]);
    }

    let mut g2 = DMatrix::zeros(n * nc, m * nc);
    for j in 0..nc {
        // Input u[k + j] first shows up in x[k + j + 1].
        let mut block = b.clone();
        g2.view_mut((j * n, j * m), (n, m)).copy_from(&block);
        for i in (j + 2)..=nc {
            block = a_at(k + i - 1) * &block;
            g2.view_mut(((i - 1) * n, j * m), (n, m)).copy_from(&block);
        }
    }

    Ok(HorizonPrediction {
        g1,
        g2,
        h_list,
        zeta: k % nc,
    })
}

/// Quadratic cost terms `(W1, W2, W3)` of the horizon problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTerms<T: Scalar> {
    pub w1: DMatrix<T>,
    pub w2: DVector<T>,
    pub w3: T,
}

impl<T: Scalar> CostTerms<T> {
    /// `1/2 U' W1 U + W2' U + W3`, the QP objective.
    pub fn qp_objective(&self, u: &DVector<T>) -> T {
        (&self.w1 * u).dot(u) * T::lit(0.5) + self.w2.dot(u) + self.w3
    }

    /// Summed stage cost `sum_j |u[k+j]|^2 + beta |x[k+j+1]|^2`, which is
    /// exactly twice [`Self::qp_objective`].
    pub fn horizon_cost(&self, u: &DVector<T>) -> T {
        self.qp_objective(u) * T::lit(2.0)
    }
}

/// `W1 = I + beta G2'G2`, `W2 = beta G2'G1 x`, `W3 = beta/2 x'G1'G1 x`.
pub fn build_cost<T: Scalar>(pred: &HorizonPrediction<T>, x: &DVector<T>, beta: T) -> Result<CostTerms<T>, MpcError> {
    if beta < T::zero() {
        return Err(MpcError::NegativeBeta(beta.as_f64()));
    }
    if x.len() != pred.states() {
        return Err(MpcError::Dimension(format!("state of length {} for {} roads", x.len(), pred.states())));
    }
    let nu = pred.g2.ncols();
    let mut w1 = pred.g2.tr_mul(&pred.g2) * beta;
    for i in 0..nu {
        w1[(i, i)] += T::one();
    }
    // Exact symmetry keeps the QP validation tolerance out of play.
    let w1 = (&w1 + w1.transpose()) * T::lit(0.5);
    let free = &pred.g1 * x;
    let w2 = pred.g2.tr_mul(&free) * beta;
    let w3 = free.dot(&free) * beta * T::lit(0.5);
    Ok(CostTerms { w1, w2, w3 })
}

/// State-independent part of the constraint system for one cycle position.
///
/// The five density/outflow families are written as `S X <= b0` with
/// `S = [-I; I; W4 - C1; W4; W4 + C2]`, so `A_in = S G2` and
/// `b_in = b0 - S G1 x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSkeleton<T: Scalar> {
    pub a_in: DMatrix<T>,
    pub state_map: DMatrix<T>,
    pub b0: DVector<T>,
    pub a_eq: DMatrix<T>,
}

/// Which family a stacked inequality row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintFamily {
    NonNegativeDensity,
    MaxDensity,
    FreeFlow,
    Capacity,
    Congestion,
}

impl ConstraintFamily {
    pub const ALL: [ConstraintFamily; 5] = [
        ConstraintFamily::NonNegativeDensity,
        ConstraintFamily::MaxDensity,
        ConstraintFamily::FreeFlow,
        ConstraintFamily::Capacity,
        ConstraintFamily::Congestion,
    ];
}

/// `W4 = blockdiag(P(zeta[k+1]), ..., P(zeta[k+n_c]))` as a diagonal vector.
pub fn outflow_block_diagonal<T: Scalar>(phases: &[PhaseMatrices<T>], k: usize) -> DVector<T> {
    let nc = phases.len();
    let n = phases[0].dim();
    DVector::from_fn(n * nc, |r, _| phases[(k + 1 + r / n) % nc].outflow_probs()[r % n])
}

pub fn build_constraint_skeleton<T: Scalar>(
    pred: &HorizonPrediction<T>,
    phases: &[PhaseMatrices<T>],
    fd: &FdProfile<T>,
    k: usize,
) -> Result<ConstraintSkeleton<T>, MpcError> {
    let n = pred.states();
    let nc = pred.horizon();
    let m = pred.inputs();
    if fd.len() != n {
        return Err(MpcError::Dimension(format!("{} FD entries for {n} roads", fd.len())));
    }
    let w4 = outflow_block_diagonal(phases, k);
    let rows = n * nc;
    let mut s_diag: Vec<DVector<T>> = Vec::with_capacity(5);
    let mut b0 = DVector::zeros(5 * rows);
    for (f, family) in ConstraintFamily::ALL.iter().enumerate() {
        let mut diag = DVector::zeros(rows);
        for r in 0..rows {
            let road = fd.road(r % n);
            let (s, b) = match family {
                ConstraintFamily::NonNegativeDensity => (-T::one(), T::zero()),
                ConstraintFamily::MaxDensity => (T::one(), road.rho_max),
                ConstraintFamily::FreeFlow => (w4[r] - road.free_flow_slope(), T::zero()),
                ConstraintFamily::Capacity => (w4[r], road.z_max),
                ConstraintFamily::Congestion => {
                    let c2 = road.congestion_slope();
                    (w4[r] + c2, c2 * road.rho_max)
                }
            };
            diag[r] = s;
            b0[f * rows + r] = b;
        }
        s_diag.push(diag);
    }
    let mut a_in = DMatrix::zeros(5 * rows, m * nc);
    let mut state_map = DMatrix::zeros(5 * rows, n);
    for (f, diag) in s_diag.iter().enumerate() {
        for r in 0..rows {
            let s = diag[r];
            for c in 0..m * nc {
                a_in[(f * rows + r, c)] = s * pred.g2[(r, c)];
            }
            for c in 0..n {
                state_map[(f * rows + r, c)] = s * pred.g1[(r, c)];
            }
        }
    }
    let mut a_eq = DMatrix::zeros(nc, m * nc);
    for j in 0..nc {
        for i in 0..m {
            a_eq[(j, j * m + i)] = T::one();
        }
    }
    Ok(ConstraintSkeleton {
        a_in,
        state_map,
        b0,
        a_eq,
    })
}

/// Linear constraints of the horizon problem at state `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem<T: Scalar> {
    pub a_in: DMatrix<T>,
    pub b_in: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub lower: DVector<T>,
}

impl<T: Scalar> ConstraintSystem<T> {
    pub fn family_of(&self, row: usize) -> ConstraintFamily {
        ConstraintFamily::ALL[row / (self.a_in.nrows() / 5)]
    }
}

fn check_state<T: Scalar>(network: &RoadNetwork, x: &DVector<T>, fd: &FdProfile<T>) -> Result<(), MpcError> {
    let tol = T::lit(STATE_TOLERANCE);
    for (i, &v) in x.iter().enumerate() {
        let max = fd.road(i).rho_max;
        if !(v >= -tol && v <= max + tol) {
            return Err(MpcError::InfeasibleAtCurrentState {
                road: network.road_id(i),
                value: v.as_f64(),
                max: max.as_f64(),
            });
        }
    }
    Ok(())
}

fn instantiate<T: Scalar>(skeleton: &ConstraintSkeleton<T>, x: &DVector<T>, u0: T) -> ConstraintSystem<T> {
    let b_in = &skeleton.b0 - &skeleton.state_map * x;
    let nc = skeleton.a_eq.nrows();
    ConstraintSystem {
        a_in: skeleton.a_in.clone(),
        b_in,
        a_eq: skeleton.a_eq.clone(),
        b_eq: DVector::from_element(nc, u0),
        lower: DVector::zeros(skeleton.a_in.ncols()),
    }
}

/// Full constraint system for the horizon starting at `k` from state `x`.
pub fn build_constraints<T: Scalar>(
    network: &RoadNetwork,
    pred: &HorizonPrediction<T>,
    phases: &[PhaseMatrices<T>],
    x: &DVector<T>,
    fd: &FdProfile<T>,
    u0: T,
    k: usize,
) -> Result<ConstraintSystem<T>, MpcError> {
    if u0 < T::zero() {
        return Err(MpcError::NegativeNetInflow(u0.as_f64()));
    }
    if x.len() != pred.states() {
        return Err(MpcError::Dimension(format!("state of length {} for {} roads", x.len(), pred.states())));
    }
    check_state(network, x, fd)?;
    let skeleton = build_constraint_skeleton(pred, phases, fd, k)?;
    Ok(instantiate(&skeleton, x, u0))
}

/// Horizon QP in solver form.
pub fn assemble_qp<T: Scalar>(cost: &CostTerms<T>, cons: &ConstraintSystem<T>) -> QpInstance<T> {
    QpInstance::new(cost.w1.clone(), cost.w2.clone())
        .with_inequalities(cons.a_in.clone(), cons.b_in.clone())
        .with_equalities(cons.a_eq.clone(), cons.b_eq.clone())
        .with_lower(cons.lower.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig<T> {
    pub beta: T,
    pub u0: T,
    pub tolerances: Tolerances<T>,
    pub max_iter: usize,
}

impl<T: Scalar> MpcConfig<T> {
    pub fn new(beta: T, u0: T) -> Self {
        Self {
            beta,
            u0,
            tolerances: Tolerances::default(),
            max_iter: 5_000,
        }
    }
}

#[derive(Debug, Clone)]
struct CachedHorizon<T: Scalar> {
    prediction: HorizonPrediction<T>,
    skeleton: ConstraintSkeleton<T>,
}

/// One control decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep<T: Scalar> {
    /// First block of the optimal `U`, one entry per inlet.
    pub inflow: DVector<T>,
    pub solution: QpSolution<T>,
}

/// Controller with per-cycle-position caches and warm starts.
pub struct MpcController<T: Scalar> {
    network: RoadNetwork,
    schedule: PhaseSchedule,
    phases: Vec<PhaseMatrices<T>>,
    input: InputMatrix<T>,
    fd: FdProfile<T>,
    config: MpcConfig<T>,
    cache: Vec<Option<CachedHorizon<T>>>,
    warm: Vec<Vec<usize>>,
    solver: QpSolver<T>,
}

impl<T: Scalar> MpcController<T> {
    pub fn new(
        network: RoadNetwork,
        schedule: PhaseSchedule,
        phases: Vec<PhaseMatrices<T>>,
        fd: FdProfile<T>,
        config: MpcConfig<T>,
    ) -> Result<Self, MpcError> {
        check_phase_table(&schedule, &phases)?;
        if config.beta < T::zero() {
            return Err(MpcError::NegativeBeta(config.beta.as_f64()));
        }
        if config.u0 < T::zero() {
            return Err(MpcError::NegativeNetInflow(config.u0.as_f64()));
        }
        if fd.len() != network.len() {
            return Err(MpcError::Dimension(format!("{} FD entries for {} roads", fd.len(), network.len())));
        }
        let input = InputMatrix::build(&network);
        let nc = schedule.cycle_length();
        let solver = QpSolver::new(config.tolerances, config.max_iter);
        Ok(Self {
            network,
            schedule,
            phases,
            input,
            fd,
            config,
            cache: vec![None; nc],
            warm: vec![Vec::new(); nc],
            solver,
        })
    }

    pub fn config(&self) -> &MpcConfig<T> {
        &self.config
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn schedule(&self) -> &PhaseSchedule {
        &self.schedule
    }

    pub fn phases(&self) -> &[PhaseMatrices<T>] {
        &self.phases
    }

    pub fn input(&self) -> &InputMatrix<T> {
        &self.input
    }

    pub fn fd(&self) -> &FdProfile<T> {
        &self.fd
    }

    fn cached(&mut self, k: usize) -> Result<&CachedHorizon<T>, MpcError> {
        let zeta = k % self.schedule.cycle_length();
        if self.cache[zeta].is_none() {
            let prediction = build_prediction(&self.schedule, &self.phases, &self.input, zeta)?;
            let skeleton = build_constraint_skeleton(&prediction, &self.phases, &self.fd, zeta)?;
            self.cache[zeta] = Some(CachedHorizon { prediction, skeleton });
        }
        Ok(self.cache[zeta].as_ref().expect("filled above"))
    }

    /// Prediction matrices for the horizon starting at `k` (cached by `k mod n_c`).
    pub fn prediction(&mut self, k: usize) -> Result<HorizonPrediction<T>, MpcError> {
        Ok(self.cached(k)?.prediction.clone())
    }

    /// Horizon QP at state `state`.
    pub fn problem(&mut self, state: &TrafficState<T>) -> Result<QpInstance<T>, MpcError> {
        check_state(&self.network, &state.x, &self.fd)?;
        let (beta, u0) = (self.config.beta, self.config.u0);
        let entry = self.cached(state.k)?;
        let cost = build_cost(&entry.prediction, &state.x, beta)?;
        let cons = instantiate(&entry.skeleton, &state.x, u0);
        Ok(assemble_qp(&cost, &cons))
    }

    /// Solves the horizon QP and returns the first inflow block.
    pub fn solve_step(&mut self, state: &TrafficState<T>) -> Result<ControlStep<T>, MpcError> {
        let qp = self.problem(state)?;
        let zeta = state.k % self.schedule.cycle_length();
        self.solver.set_warm_start(std::mem::take(&mut self.warm[zeta]));
        let solution = self.solver.solve(&qp)?;
        match solution.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err(MpcError::QpInfeasible { k: state.k }),
            QpStatus::MaxIterations => {
                return Err(MpcError::QpMaxIterations {
                    k: state.k,
                    iterations: solution.iterations,
                })
            }
        }
        self.warm[zeta] = solution.active.clone();
        let m = self.input.inputs();
        // Round-off below the solver tolerance must not reach the plant as a negative inflow.
        let inflow = DVector::from_fn(m, |i, _| solution.x[i].max(T::zero()));
        log::debug!(
            "k={} zeta={} iterations={} active={} fallback={}",
            state.k,
            zeta,
            solution.iterations,
            solution.active.len(),
            solution.used_fallback
        );
        Ok(ControlStep { inflow, solution })
    }
}
