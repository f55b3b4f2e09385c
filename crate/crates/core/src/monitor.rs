//! Runtime checks of the safety and liveness requirements over traces.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::FdProfile;
use crate::network::RoadId;
use crate::scalar::Scalar;

/// Absolute slack on every numeric atom.
pub const ATOM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("liveness needs a non-empty trace")]
    EmptyTrace,
    #[error("eps must be positive and hold_window at least 1")]
    InvalidParameters,
}

/// One closed-loop time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<T: Scalar> {
    pub k: usize,
    /// Densities `x[k]`.
    pub x: DVector<T>,
    /// Inflow `u[k]` applied at the inlets.
    pub u: DVector<T>,
    /// Outflows `z[k]`.
    pub z: DVector<T>,
    /// NOIR phase active at `k`.
    pub zeta: usize,
    /// NOIR phase the schedule moves to at `k + 1`.
    pub gamma: usize,
    pub outlet_outflow_sum: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyAtom {
    InflowNonNegative,
    InflowBelowNet,
    InflowBalance,
    DensityNonNegative,
    DensityMax,
    OutflowNonNegative,
    OutflowFreeFlow,
    OutflowCapacity,
    OutflowCongestion,
    PhaseTransition,
}

impl fmt::Display for SafetyAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SafetyAtom::InflowNonNegative => "inflow_nonnegative",
            SafetyAtom::InflowBelowNet => "inflow_below_net",
            SafetyAtom::InflowBalance => "inflow_balance",
            SafetyAtom::DensityNonNegative => "density_nonnegative",
            SafetyAtom::DensityMax => "density_max",
            SafetyAtom::OutflowNonNegative => "outflow_nonnegative",
            SafetyAtom::OutflowFreeFlow => "outflow_free_flow",
            SafetyAtom::OutflowCapacity => "outflow_capacity",
            SafetyAtom::OutflowCongestion => "outflow_congestion",
            SafetyAtom::PhaseTransition => "phase_transition",
        };
        f.write_str(name)
    }
}

/// A failed atom; `margin` is by how much the inequality misses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyViolation {
    pub k: usize,
    pub atom: SafetyAtom,
    /// Road (or inlet road) concerned; `None` for network-wide atoms.
    pub road: Option<RoadId>,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    SatisfiedAt(usize),
    NotYetSatisfied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub safety_violations: Vec<SafetyViolation>,
    pub liveness: Liveness,
    pub epsilon: f64,
    pub hold_window: usize,
}

impl Verdict {
    pub fn is_safe(&self) -> bool {
        self.safety_violations.is_empty()
    }

    pub fn is_live(&self) -> bool {
        matches!(self.liveness, Liveness::SatisfiedAt(_))
    }
}

/// Per-record safety checks against a fixed network description.
#[derive(Debug, Clone)]
pub struct SafetyMonitor<'a, T: Scalar> {
    pub road_ids: &'a [RoadId],
    pub inlet_ids: &'a [RoadId],
    pub fd: &'a FdProfile<T>,
    pub u0: T,
    pub cycle_length: usize,
    pub tolerance: T,
}

impl<'a, T: Scalar> SafetyMonitor<'a, T> {
    pub fn new(road_ids: &'a [RoadId], inlet_ids: &'a [RoadId], fd: &'a FdProfile<T>, u0: T, cycle_length: usize) -> Self {
        Self {
            road_ids,
            inlet_ids,
            fd,
            u0,
            cycle_length,
            tolerance: T::lit(ATOM_TOLERANCE),
        }
    }

    /// Every failed atom of one record.
    pub fn check(&self, rec: &TraceRecord<T>) -> Vec<SafetyViolation> {
        let tol = self.tolerance;
        let mut out = Vec::new();
        let mut push = |atom, road, excess: T| {
            if excess > tol {
                out.push(SafetyViolation {
                    k: rec.k,
                    atom,
                    road,
                    margin: excess.as_f64(),
                });
            }
        };

        for (i, &u) in rec.u.iter().enumerate() {
            let road = self.inlet_ids.get(i).copied();
            push(SafetyAtom::InflowNonNegative, road, -u);
            push(SafetyAtom::InflowBelowNet, road, u - self.u0);
        }
        push(SafetyAtom::InflowBalance, None, (rec.u.sum() - self.u0).abs());

        for (i, (&rho, &z)) in rec.x.iter().zip(rec.z.iter()).enumerate() {
            let road = self.road_ids.get(i).copied();
            let fd = self.fd.road(i);
            push(SafetyAtom::DensityNonNegative, road, -rho);
            push(SafetyAtom::DensityMax, road, rho - fd.rho_max);
            push(SafetyAtom::OutflowNonNegative, road, -z);
            // The diagram is only defined on [0, rho_max]; outside it the
            // density atoms already fire.
            if rho >= T::zero() && rho <= fd.rho_max {
                push(SafetyAtom::OutflowFreeFlow, road, z - fd.free_flow_slope() * rho);
                push(SafetyAtom::OutflowCapacity, road, z - fd.z_max);
                push(SafetyAtom::OutflowCongestion, road, z - fd.congestion_slope() * (fd.rho_max - rho));
            }
        }

        let nc = self.cycle_length;
        if nc == 0 || rec.zeta != rec.k % nc || rec.gamma != (rec.zeta + 1) % nc {
            out.push(SafetyViolation {
                k: rec.k,
                atom: SafetyAtom::PhaseTransition,
                road: None,
                margin: 1.0,
            });
        }
        out
    }

    /// Violations over a whole trace, including phase continuity between records.
    pub fn check_trace(&self, trace: &[TraceRecord<T>]) -> Vec<SafetyViolation> {
        let mut out: Vec<SafetyViolation> = trace.iter().flat_map(|r| self.check(r)).collect();
        for pair in trace.windows(2) {
            if pair[1].zeta != pair[0].gamma {
                out.push(SafetyViolation {
                    k: pair[1].k,
                    atom: SafetyAtom::PhaseTransition,
                    road: None,
                    margin: 1.0,
                });
            }
        }
        out.sort_by(|a, b| a.k.cmp(&b.k).then(a.atom.cmp(&b.atom)));
        out
    }
}

/// Safety atoms of one record, without phase bookkeeping beyond the record itself.
pub fn check_safety<T: Scalar>(
    rec: &TraceRecord<T>,
    road_ids: &[RoadId],
    inlet_ids: &[RoadId],
    fd: &FdProfile<T>,
    u0: T,
    cycle_length: usize,
) -> Vec<SafetyViolation> {
    SafetyMonitor::new(road_ids, inlet_ids, fd, u0, cycle_length).check(rec)
}

/// First `k_s` from which `|sum z_out - u0| < eps` holds through the end of
/// the trace, provided that tail spans at least `hold_window` records.
pub fn check_liveness<T: Scalar>(
    trace: &[TraceRecord<T>],
    u0: T,
    eps: T,
    hold_window: usize,
) -> Result<Liveness, MonitorError> {
    let sums: Vec<T> = trace.iter().map(|r| r.outlet_outflow_sum).collect();
    liveness_of_sums(&sums, u0, eps, hold_window)
}

/// [`check_liveness`] on the bare outlet-outflow series.
pub fn liveness_of_sums<T: Scalar>(sums: &[T], u0: T, eps: T, hold_window: usize) -> Result<Liveness, MonitorError> {
    if sums.is_empty() {
        return Err(MonitorError::EmptyTrace);
    }
    if !(eps > T::zero()) || hold_window == 0 {
        return Err(MonitorError::InvalidParameters);
    }
    let mut start = sums.len();
    while start > 0 && (sums[start - 1] - u0).abs() < eps {
        start -= 1;
    }
    if sums.len() - start >= hold_window {
        Ok(Liveness::SatisfiedAt(start))
    } else {
        Ok(Liveness::NotYetSatisfied)
    }
}
