//! Switching conservation dynamics `x[k+1] = A(ζ[k]) x[k] + B u[k]`.
//!
//! `P(ζ)` holds per-road outflow probabilities, `Q(ζ)` routes the outflow of
//! column road `i` to row road `j`, and `A(ζ) = I + (Q(ζ) - I) P(ζ)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{PhaseSchedule, RoadId, RoadNetwork};
use crate::scalar::Scalar;

/// Absolute tolerance on `Q` column sums.
pub const SPLIT_TOLERANCE: f64 = 1e-9;
/// Slack allowed on the density range check after a step.
pub const DENSITY_TOLERANCE: f64 = 1e-9;
pub const POWER_ITERATION_MAX: usize = 10_000;
/// Plain power steps tried before switching to repeated squaring.
const PLAIN_ITERATIONS: usize = 500;
/// Squarings tried after the plain steps; 2^64 power steps in total.
const SQUARING_PASSES: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid fundamental diagram: {0}")]
    InvalidFd(String),
    #[error("outflow probability of road {road} is {value}, outside (0, 1]")]
    Property3Violation { road: RoadId, value: f64 },
    #[error("split fraction Q[{to},{from}] = {value} is outside [0, 1]")]
    Property4Violation { from: RoadId, to: RoadId, value: f64 },
    #[error("split matrix has nonzero diagonal entry at road {road}")]
    Property5Violation { road: RoadId },
    #[error("split matrix routes both {a} -> {b} and {b} -> {a}")]
    Property6Violation { a: RoadId, b: RoadId },
    #[error("split column of road {road} sums to {sum}, expected {expected}")]
    Property7Violation { road: RoadId, sum: f64, expected: f64 },
    #[error("split fraction {from} -> {to} is nonzero but the edge does not exist")]
    SplitOffEdge { from: RoadId, to: RoadId },
    #[error("splits of road {road} sum to {sum}, not 1")]
    SplitNotNormalized { road: RoadId, sum: f64 },
    #[error("boundary inflow {index} is negative ({value})")]
    NegativeInflow { index: usize, value: f64 },
    #[error("density of road {road} is {value}, outside [0, {max}]")]
    DensityOutOfRange { road: RoadId, value: f64, max: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("power iteration did not converge within {0} iterations")]
    PowerIterationNoConvergence(usize),
}

/// Trapezoidal fundamental diagram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdParams<T> {
    pub z_max: T,
    pub rho_min: T,
    pub rho_mid: T,
    pub rho_max: T,
}

impl<T: Scalar> FdParams<T> {
    pub fn new(z_max: T, rho_min: T, rho_mid: T, rho_max: T) -> Result<Self, DynamicsError> {
        let fd = Self {
            z_max,
            rho_min,
            rho_mid,
            rho_max,
        };
        fd.validate()?;
        Ok(fd)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let zero = T::zero();
        if !(self.z_max > zero) {
            return Err(DynamicsError::InvalidFd(format!("z_max = {} must be positive", self.z_max)));
        }
        if !(zero < self.rho_min && self.rho_min < self.rho_mid && self.rho_mid < self.rho_max) {
            return Err(DynamicsError::InvalidFd(format!(
                "need 0 < rho_min < rho_mid < rho_max, got {} / {} / {}",
                self.rho_min, self.rho_mid, self.rho_max
            )));
        }
        Ok(())
    }

    /// Slope of the free-flow (left) side, `z_max / rho_min`.
    pub fn free_flow_slope(&self) -> T {
        self.z_max / self.rho_min
    }

    /// Magnitude of the congested (right) side slope, `z_max / (rho_max - rho_mid)`.
    pub fn congestion_slope(&self) -> T {
        self.z_max / (self.rho_max - self.rho_mid)
    }

    /// Largest outflow the diagram admits at density `rho`.
    pub fn outflow_cap(&self, rho: T) -> Result<T, DynamicsError> {
        if rho < T::zero() || rho > self.rho_max {
            return Err(DynamicsError::DensityOutOfRange {
                road: 0,
                value: rho.as_f64(),
                max: self.rho_max.as_f64(),
            });
        }
        let left = self.free_flow_slope() * rho;
        let right = self.congestion_slope() * (self.rho_max - rho);
        Ok(left.min(self.z_max).min(right).max(T::zero()))
    }

    pub fn cast<U: Scalar>(&self) -> FdParams<U> {
        FdParams {
            z_max: U::lit(self.z_max.as_f64()),
            rho_min: U::lit(self.rho_min.as_f64()),
            rho_mid: U::lit(self.rho_mid.as_f64()),
            rho_max: U::lit(self.rho_max.as_f64()),
        }
    }
}

/// Free function form of [`FdParams::outflow_cap`].
pub fn fd_outflow_cap<T: Scalar>(rho: T, fd: &FdParams<T>) -> Result<T, DynamicsError> {
    fd.outflow_cap(rho)
}

/// Per-road fundamental diagrams, in matrix order.
#[derive(Debug, Clone, PartialEq)]
pub struct FdProfile<T> {
    roads: Vec<FdParams<T>>,
}

impl<T: Scalar> FdProfile<T> {
    pub fn uniform(fd: FdParams<T>, n: usize) -> Self {
        Self { roads: vec![fd; n] }
    }

    pub fn from_roads(roads: Vec<FdParams<T>>) -> Result<Self, DynamicsError> {
        for fd in &roads {
            fd.validate()?;
        }
        Ok(Self { roads })
    }

    pub fn len(&self) -> usize {
        self.roads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
    }

    pub fn road(&self, i: usize) -> &FdParams<T> {
        &self.roads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &FdParams<T>> {
        self.roads.iter()
    }
}

/// Outflow-probability, split and state matrices of one NOIR phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrices<T: Scalar> {
    p: DVector<T>,
    q: DMatrix<T>,
    a: DMatrix<T>,
}

impl<T: Scalar> PhaseMatrices<T> {
    /// Validates `diag(p)` and `q` against the network and forms `A = I + (Q - I) P`.
    pub fn from_parts(network: &RoadNetwork, p: DVector<T>, q: DMatrix<T>) -> Result<Self, DynamicsError> {
        let n = network.len();
        if p.len() != n || q.shape() != (n, n) {
            return Err(DynamicsError::Dimension(format!(
                "expected p of length {n} and q of {n}x{n}, got {} and {:?}",
                p.len(),
                q.shape()
            )));
        }
        validate_parts(network, &p, &q)?;
        let mut a = &q * DMatrix::from_diagonal(&p);
        for i in 0..n {
            a[(i, i)] += T::one() - p[i];
        }
        Ok(Self { p, q, a })
    }

    /// Outflow probabilities (diagonal of `P`).
    pub fn outflow_probs(&self) -> &DVector<T> {
        &self.p
    }

    pub fn p_matrix(&self) -> DMatrix<T> {
        DMatrix::from_diagonal(&self.p)
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }
}

fn validate_parts<T: Scalar>(network: &RoadNetwork, p: &DVector<T>, q: &DMatrix<T>) -> Result<(), DynamicsError> {
    let n = network.len();
    let zero = T::zero();
    let one = T::one();
    let id = |i: usize| network.road_id(i);
    for i in 0..n {
        if !(p[i] > zero && p[i] <= one) {
            return Err(DynamicsError::Property3Violation {
                road: id(i),
                value: p[i].as_f64(),
            });
        }
    }
    for i in 0..n {
        for j in 0..n {
            let v = q[(j, i)];
            if !(v >= zero && v <= one) {
                return Err(DynamicsError::Property4Violation {
                    from: id(i),
                    to: id(j),
                    value: v.as_f64(),
                });
            }
        }
    }
    for i in 0..n {
        if q[(i, i)] != zero {
            return Err(DynamicsError::Property5Violation { road: id(i) });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if q[(j, i)] != zero && q[(i, j)] != zero {
                return Err(DynamicsError::Property6Violation { a: id(i), b: id(j) });
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if q[(j, i)] != zero && !network.has_edge_idx(i, j) {
                return Err(DynamicsError::SplitOffEdge { from: id(i), to: id(j) });
            }
        }
    }
    let tol = split_tolerance::<T>();
    for i in 0..n {
        let sum = q.column(i).sum();
        let expected = if network.is_outlet(i) { zero } else { one };
        if (sum - expected).abs() > tol {
            return Err(DynamicsError::Property7Violation {
                road: id(i),
                sum: sum.as_f64(),
                expected: expected.as_f64(),
            });
        }
    }
    Ok(())
}

/// [`SPLIT_TOLERANCE`], widened to a few ulps for single precision.
fn split_tolerance<T: Scalar>() -> T {
    T::lit(SPLIT_TOLERANCE).max(T::default_epsilon() * T::lit(64.0))
}

fn fd_scale<T: Scalar>(fd: &FdProfile<T>) -> T {
    fd.iter().fold(T::one(), |m, f| m.max(f.rho_max))
}

/// Explicit split fractions `q_{to, from}` for one phase, keyed by road ids.
pub type SplitEntries<T> = BTreeMap<(RoadId, RoadId), T>;

/// Assembles `Q` from explicit splits, defaulting to a uniform split over
/// out-neighbors for roads without entries.
///
/// A road with at least one explicit entry takes zero on unlisted out-edges;
/// its column is rescaled to sum to one when within [`SPLIT_TOLERANCE`].
pub fn assemble_split_matrix<T: Scalar>(
    network: &RoadNetwork,
    splits: &SplitEntries<T>,
) -> Result<DMatrix<T>, DynamicsError> {
    let n = network.len();
    let mut q = DMatrix::zeros(n, n);
    let mut explicit = vec![false; n];
    for (&(from, to), &v) in splits {
        let i = network.index_of(from).map_err(|_| DynamicsError::SplitOffEdge { from, to })?;
        let j = network.index_of(to).map_err(|_| DynamicsError::SplitOffEdge { from, to })?;
        if !network.has_edge_idx(i, j) {
            return Err(DynamicsError::SplitOffEdge { from, to });
        }
        if !(v >= T::zero() && v <= T::one()) {
            return Err(DynamicsError::Property4Violation {
                from,
                to,
                value: v.as_f64(),
            });
        }
        q[(j, i)] = v;
        explicit[i] = true;
    }
    for i in 0..n {
        let outs = network.out_neighbors_idx(i);
        if outs.is_empty() {
            continue;
        }
        if !explicit[i] {
            let share = T::one() / T::from_usize(outs.len()).expect("usize fits scalar");
            for &j in outs {
                q[(j, i)] = share;
            }
            continue;
        }
        let sum = q.column(i).sum();
        if (sum - T::one()).abs() > split_tolerance::<T>() {
            return Err(DynamicsError::SplitNotNormalized {
                road: network.road_id(i),
                sum: sum.as_f64(),
            });
        }
        for &j in outs {
            q[(j, i)] /= sum;
        }
    }
    Ok(q)
}

/// Builds one phase's matrices from per-road outflow probabilities and explicit splits.
pub fn build_phase_matrices<T: Scalar>(
    network: &RoadNetwork,
    outflow_probs: &[T],
    splits: &SplitEntries<T>,
) -> Result<PhaseMatrices<T>, DynamicsError> {
    let q = assemble_split_matrix(network, splits)?;
    PhaseMatrices::from_parts(network, DVector::from_column_slice(outflow_probs), q)
}

/// Default outflow probabilities for a road depending on whether its junction serves it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutflowDefaults<T> {
    /// Road is the tail of an enabled phase edge.
    pub p_on: T,
    /// Road waits at a junction that serves another road.
    pub p_off: T,
    /// Outlet roads discharge off-network and are never held by a junction.
    pub p_outlet: T,
}

impl<T: Scalar> Default for OutflowDefaults<T> {
    fn default() -> Self {
        Self {
            p_on: T::lit(0.8),
            p_off: T::lit(0.2),
            p_outlet: T::lit(0.2),
        }
    }
}

/// Per-road outflow probabilities under NOIR phase `zeta`, in matrix order.
pub fn default_outflow_probs<T: Scalar>(
    network: &RoadNetwork,
    schedule: &PhaseSchedule,
    zeta: usize,
    defaults: &OutflowDefaults<T>,
) -> Vec<T> {
    let served = schedule.served_roads(zeta);
    (0..network.len())
        .map(|i| {
            if network.is_outlet(i) {
                defaults.p_outlet
            } else if served.contains(&network.road_id(i)) {
                defaults.p_on
            } else {
                defaults.p_off
            }
        })
        .collect()
}

/// Inlet selector `B` (N x N_in); column `j` injects into the `j`-th inlet.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMatrix<T: Scalar> {
    b: DMatrix<T>,
    inlets: Vec<usize>,
}

impl<T: Scalar> InputMatrix<T> {
    pub fn build(network: &RoadNetwork) -> Self {
        let inlets = network.inlets().to_vec();
        let mut b = DMatrix::zeros(network.len(), inlets.len());
        for (col, &row) in inlets.iter().enumerate() {
            b[(row, col)] = T::one();
        }
        Self { b, inlets }
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.b
    }

    /// Number of controlled inlets `N_in`.
    pub fn inputs(&self) -> usize {
        self.inlets.len()
    }

    pub fn inlet_rows(&self) -> &[usize] {
        &self.inlets
    }
}

/// Free function form of [`InputMatrix::build`].
pub fn build_input_matrix<T: Scalar>(network: &RoadNetwork) -> InputMatrix<T> {
    InputMatrix::build(network)
}

/// Road densities at time `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState<T: Scalar> {
    pub x: DVector<T>,
    pub k: usize,
}

impl<T: Scalar> TrafficState<T> {
    pub fn new(x: DVector<T>, k: usize) -> Self {
        Self { x, k }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DVector::zeros(n), 0)
    }

    pub fn total(&self) -> T {
        self.x.sum()
    }

    /// Checks `0 <= x_i <= rho_max_i` up to [`DENSITY_TOLERANCE`].
    pub fn check_range(&self, network: &RoadNetwork, fd: &FdProfile<T>) -> Result<(), DynamicsError> {
        check_density(network, &self.x, fd)
    }
}

fn check_density<T: Scalar>(network: &RoadNetwork, x: &DVector<T>, fd: &FdProfile<T>) -> Result<(), DynamicsError> {
    let tol = T::lit(DENSITY_TOLERANCE).max(T::default_epsilon() * T::lit(64.0) * fd_scale(fd));
    for (i, &v) in x.iter().enumerate() {
        let max = fd.road(i).rho_max;
        if !(v >= -tol && v <= max + tol) {
            return Err(DynamicsError::DensityOutOfRange {
                road: network.road_id(i),
                value: v.as_f64(),
                max: max.as_f64(),
            });
        }
    }
    Ok(())
}

/// Outflows `z = P x`.
pub fn outflows<T: Scalar>(state: &TrafficState<T>, mats: &PhaseMatrices<T>) -> DVector<T> {
    state.x.component_mul(mats.outflow_probs())
}

/// Advances one step: `x' = A x + B u`, `k' = k + 1`.
///
/// Densities leaving `[0, rho_max]` are reported, not clamped.
pub fn step<T: Scalar>(
    network: &RoadNetwork,
    state: &TrafficState<T>,
    mats: &PhaseMatrices<T>,
    input: &InputMatrix<T>,
    u: &DVector<T>,
    fd: &FdProfile<T>,
) -> Result<TrafficState<T>, DynamicsError> {
    if u.len() != input.inputs() || state.x.len() != mats.dim() {
        return Err(DynamicsError::Dimension(format!(
            "state {} / phase {} / inflow {} / inlets {}",
            state.x.len(),
            mats.dim(),
            u.len(),
            input.inputs()
        )));
    }
    if let Some((index, &value)) = u.iter().enumerate().find(|(_, v)| **v < T::zero()) {
        return Err(DynamicsError::NegativeInflow {
            index,
            value: value.as_f64(),
        });
    }
    let x = mats.a() * &state.x + input.matrix() * u;
    check_density(network, &x, fd)?;
    Ok(TrafficState::new(x, state.k + 1))
}

/// Spectral radius of each phase's state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport<T> {
    pub radii: Vec<T>,
}

impl<T: Scalar> StabilityReport<T> {
    /// All radii strictly below one.
    pub fn passes(&self) -> bool {
        self.radii.iter().all(|&r| r < T::one())
    }

    pub fn max_radius(&self) -> T {
        self.radii.iter().copied().fold(T::zero(), |a, b| a.max(b))
    }
}

pub fn stability_report<T: Scalar>(phases: &[PhaseMatrices<T>]) -> Result<StabilityReport<T>, DynamicsError> {
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    let radii = phases
        .iter()
        .map(|m| spectral_radius_nonneg(m.a(), tol, POWER_ITERATION_MAX))
        .collect::<Result<_, _>>()?;
    Ok(StabilityReport { radii })
}

/// Spectral radius of an entrywise nonnegative matrix.
///
/// The spectrum of a nonnegative matrix is the union of the spectra of its
/// strongly connected diagonal blocks. Each irreducible block is shifted by
/// the identity so it becomes primitive, then iterated until the
/// Collatz-Wielandt bounds `min (Mx)_i/x_i <= ρ(M) <= max (Mx)_i/x_i` agree
/// to `rel_tol`. At most `max_iter` plain steps are taken before the
/// iteration matrix is squared repeatedly.
pub fn spectral_radius_nonneg<T: Scalar>(a: &DMatrix<T>, rel_tol: T, max_iter: usize) -> Result<T, DynamicsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DynamicsError::Dimension(format!("matrix is {:?}, not square", a.shape())));
    }
    let mut graph = DiGraph::<(), ()>::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(j, i)] != T::zero() {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }

    let mut radius = T::zero();
    for component in tarjan_scc(&graph) {
        let mut idx: Vec<usize> = component.iter().map(|v| v.index()).collect();
        idx.sort_unstable();
        let r = if idx.len() == 1 {
            a[(idx[0], idx[0])].abs()
        } else {
            irreducible_radius(a, &idx, rel_tol, max_iter)?
        };
        radius = radius.max(r);
    }
    Ok(radius)
}

fn irreducible_radius<T: Scalar>(a: &DMatrix<T>, idx: &[usize], rel_tol: T, max_iter: usize) -> Result<T, DynamicsError> {
    let m = idx.len();
    let shifted = DMatrix::from_fn(m, m, |r, c| {
        let v = a[(idx[r], idx[c])];
        if r == c {
            v + T::one()
        } else {
            v
        }
    });
    let collatz_wielandt = |x: &DVector<T>| {
        let y = &shifted * x;
        let (mut lo, mut hi) = (T::infinity(), T::zero());
        for i in 0..m {
            let ratio = y[i] / x[i];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        (y, lo, hi)
    };
    let mut x = DVector::from_element(m, T::one());
    for _ in 0..max_iter.min(PLAIN_ITERATIONS) {
        let (y, lo, hi) = collatz_wielandt(&x);
        if hi - lo <= rel_tol * hi {
            return Ok((lo + hi) * T::lit(0.5) - T::one());
        }
        let scale = y.max();
        x = y / scale;
    }
    // Slow separation between the two leading eigenvalues: square the
    // iteration matrix so each pass doubles the number of power steps.
    let mut power = shifted.clone();
    for _ in 0..SQUARING_PASSES {
        power = &power * &power;
        let scale = power.max();
        power /= scale;
        let v = &power * &x;
        let scale = v.max();
        if !(scale > T::zero()) {
            break;
        }
        let v = v / scale;
        if v.iter().any(|&c| !(c > T::zero())) {
            continue;
        }
        let (_, lo, hi) = collatz_wielandt(&v);
        if hi - lo <= rel_tol * hi {
            return Ok((lo + hi) * T::lit(0.5) - T::one());
        }
    }
    Err(DynamicsError::PowerIterationNoConvergence(max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn chain() -> RoadNetwork {
        RoadNetwork::build(&[1, 2], &[(1, 2)]).unwrap()
    }

    fn table_iv() -> FdParams<f64> {
        FdParams::new(20.0, 20.0, 40.0, 55.0).unwrap()
    }

    fn chain_mats() -> PhaseMatrices<f64> {
        build_phase_matrices(&chain(), &[0.5, 0.5], &SplitEntries::new()).unwrap()
    }

    #[test]
    fn chain_state_matrix_by_hand() {
        let m = chain_mats();
        assert_eq!(m.a(), &dmatrix![0.5, 0.0; 0.5, 0.5]);
    }

    #[test]
    fn identity_outflow_gives_q_minus_diagonal() {
        let net = RoadNetwork::build(&[1, 2, 3], &[(1, 2), (2, 3)]).unwrap();
        let m = build_phase_matrices(&net, &[1.0, 1.0, 1.0], &SplitEntries::new()).unwrap();
        assert_eq!(m.a(), &dmatrix![0.0, 0.0, 0.0; 1.0, 0.0, 0.0; 0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_fork_split() {
        let net = RoadNetwork::build(&[1, 2, 3], &[(1, 2), (1, 3)]).unwrap();
        let m = build_phase_matrices(&net, &[1.0; 3], &SplitEntries::new()).unwrap();
        assert_abs_diff_eq!(m.q().column(0).sum(), 1.0);
        assert_eq!(m.q()[(1, 0)], 0.5);
        assert_eq!(m.q()[(2, 0)], 0.5);
    }

    #[test]
    fn near_unit_splits_are_renormalized() {
        let net = RoadNetwork::build(&[1, 2, 3], &[(1, 2), (1, 3)]).unwrap();
        let splits = SplitEntries::from([((1, 2), 0.25), ((1, 3), 0.75 + 5e-10)]);
        let q = assemble_split_matrix(&net, &splits).unwrap();
        assert_abs_diff_eq!(q.column(0).sum(), 1.0, epsilon = 1e-15);

        let bad = SplitEntries::from([((1, 2), 0.25), ((1, 3), 0.5)]);
        assert!(matches!(
            assemble_split_matrix(&net, &bad),
            Err(DynamicsError::SplitNotNormalized { road: 1, .. })
        ));
    }

    #[test]
    fn property_violations_are_named() {
        let net = chain();
        let q = dmatrix![0.0, 0.0; 1.0, 0.0];
        assert!(matches!(
            PhaseMatrices::from_parts(&net, DVector::from_vec(vec![0.0, 0.5]), q.clone()),
            Err(DynamicsError::Property3Violation { road: 1, .. })
        ));
        assert!(matches!(
            PhaseMatrices::from_parts(&net, DVector::from_vec(vec![1.5, 0.5]), q),
            Err(DynamicsError::Property3Violation { road: 1, .. })
        ));
        let neg = dmatrix![0.0, 0.0; -1.0, 0.0];
        assert!(matches!(
            PhaseMatrices::from_parts(&net, DVector::from_vec(vec![0.5, 0.5]), neg),
            Err(DynamicsError::Property4Violation { .. })
        ));
        let diag = dmatrix![0.5, 0.0; 0.5, 0.0];
        assert!(matches!(
            PhaseMatrices::from_parts(&net, DVector::from_vec(vec![0.5, 0.5]), diag),
            Err(DynamicsError::Property5Violation { road: 1 })
        ));
        let both = dmatrix![0.0, 0.5; 1.0, 0.0];
        assert!(matches!(
            PhaseMatrices::from_parts(&net, DVector::from_vec(vec![0.5, 0.5]), both),
            Err(DynamicsError::Property6Violation { a: 1, b: 2 })
        ));
        let short = dmatrix![0.0, 0.0; 0.5, 0.0];
        assert!(matches!(
            PhaseMatrices::from_parts(&net, DVector::from_vec(vec![0.5, 0.5]), short),
            Err(DynamicsError::Property7Violation { road: 1, .. })
        ));
    }

    #[test]
    fn input_matrix_selects_inlets() {
        let b = InputMatrix::<f64>::build(&chain());
        assert_eq!(b.matrix(), &dmatrix![1.0; 0.0]);
        let net = RoadNetwork::build(&[1, 2, 3, 4], &[(1, 3), (2, 3), (3, 4)]).unwrap();
        let b = InputMatrix::<f64>::build(&net);
        assert_eq!(b.matrix(), &dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0; 0.0, 0.0]);
    }

    #[test]
    fn chain_step_by_hand() {
        let net = chain();
        let m = chain_mats();
        let b = InputMatrix::build(&net);
        let fd = FdProfile::uniform(table_iv(), 2);
        let s = TrafficState::new(DVector::from_vec(vec![10.0, 10.0]), 3);
        assert_eq!(outflows(&s, &m).as_slice(), &[5.0, 5.0]);
        let next = step(&net, &s, &m, &b, &DVector::from_vec(vec![4.0]), &fd).unwrap();
        assert_eq!(next.x.as_slice(), &[9.0, 10.0]);
        assert_eq!(next.k, 4);

        let zero = step(&net, &TrafficState::zeros(2), &m, &b, &DVector::zeros(1), &fd).unwrap();
        assert_eq!(zero.x.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_traffic_barely_moves() {
        let net = chain();
        let m = build_phase_matrices(&net, &[1e-6, 1e-6], &SplitEntries::new()).unwrap();
        let b = InputMatrix::build(&net);
        let fd = FdProfile::uniform(table_iv(), 2);
        let s = TrafficState::new(DVector::from_vec(vec![30.0, 12.0]), 0);
        let next = step(&net, &s, &m, &b, &DVector::zeros(1), &fd).unwrap();
        assert!((next.x - s.x).amax() < 1e-4);
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let net = chain();
        let m = chain_mats();
        let b = InputMatrix::build(&net);
        let fd = FdProfile::uniform(table_iv(), 2);
        let s = TrafficState::new(DVector::from_vec(vec![10.0, 10.0]), 0);
        assert!(matches!(
            step(&net, &s, &m, &b, &DVector::from_vec(vec![-1.0]), &fd),
            Err(DynamicsError::NegativeInflow { index: 0, .. })
        ));
        assert!(matches!(
            step(&net, &s, &m, &b, &DVector::from_vec(vec![60.0]), &fd),
            Err(DynamicsError::DensityOutOfRange { road: 1, .. })
        ));
    }

    #[test]
    fn outflow_at_jam_density_is_not_capped_here() {
        let net = RoadNetwork::build(&[1, 2], &[(1, 2)]).unwrap();
        let m = build_phase_matrices(&net, &[1.0, 1.0], &SplitEntries::new()).unwrap();
        let s = TrafficState::new(DVector::from_vec(vec![55.0, 0.0]), 0);
        assert_eq!(outflows(&s, &m)[0], 55.0);
    }

    #[test]
    fn fd_cap_values() {
        let fd = table_iv();
        assert_eq!(fd.outflow_cap(0.0).unwrap(), 0.0);
        assert_eq!(fd.outflow_cap(20.0).unwrap(), 20.0);
        assert_eq!(fd.outflow_cap(55.0).unwrap(), 0.0);
        assert_eq!(fd.outflow_cap(10.0).unwrap(), 10.0);
        assert_abs_diff_eq!(fd.outflow_cap(47.5).unwrap(), 10.0, epsilon = 1e-12);
        assert!(fd.outflow_cap(56.0).is_err());
        assert!(FdParams::new(20.0, 40.0, 20.0, 55.0).is_err());
    }

    #[test]
    fn chain_radius_is_half() {
        let r = stability_report(&[chain_mats()]).unwrap();
        assert_abs_diff_eq!(r.radii[0], 0.5, epsilon = 1e-12);
        assert!(r.passes());
    }

    #[test]
    fn nilpotent_and_cyclic_blocks() {
        let nil = dmatrix![0.0, 0.0; 1.0, 0.0];
        assert_eq!(spectral_radius_nonneg(&nil, 1e-12, 100).unwrap(), 0.0);
        // 3-cycle permutation scaled by 0.9: eigenvalues 0.9 * cube roots of unity
        let cyc = dmatrix![0.0, 0.0, 0.9; 0.9, 0.0, 0.0; 0.0, 0.9, 0.0];
        let r = spectral_radius_nonneg(&cyc, 1e-12, 10_000).unwrap();
        assert_abs_diff_eq!(r, 0.9, epsilon = 1e-10);
    }

    #[test]
    fn works_in_single_precision() {
        let net = chain();
        let m = build_phase_matrices(&net, &[0.5f32, 0.5], &SplitEntries::new()).unwrap();
        let r = stability_report(&[m]).unwrap();
        assert!((r.radii[0] - 0.5).abs() < 1e-5);
    }
}
