//! Road graph, junction movement phases and the cyclic phase schedule.
//!
//! Roads are the nodes of a directed graph; an edge `(i, j)` means vehicles
//! leaving road `i` may enter road `j`. Road ids are external labels; every
//! matrix in the crate is laid out by the 0-based index of the id in
//! ascending order.

use std::collections::{BTreeMap, BTreeSet};

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RoadId = u32;
pub type JunctionId = u32;
pub type Edge = (RoadId, RoadId);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("network has no roads")]
    Empty,
    #[error("road id {0} listed more than once")]
    DuplicateRoadId(RoadId),
    #[error("edge references unknown road id {0}")]
    UnknownRoadId(RoadId),
    #[error("self-loop on road {0}")]
    SelfLoop(RoadId),
    #[error("edges ({0},{1}) and ({1},{0}) are both present")]
    AntiparallelEdge(RoadId, RoadId),
    #[error("road {0} has neither in- nor out-neighbors")]
    IsolatedRoad(RoadId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("junction {0} has an empty phase cycle")]
    EmptyCycle(JunctionId),
    #[error("junction {0} is declared more than once")]
    DuplicateJunction(JunctionId),
    #[error("junction {junction} declares unknown road {road}")]
    UnknownJunctionRoad { junction: JunctionId, road: RoadId },
    #[error("phase edge ({},{}) at junction {junction} is not a network edge", edge.0, edge.1)]
    PhaseEdgeNotInNetwork { junction: JunctionId, edge: Edge },
    #[error("phase edge ({},{}) is not incident to junction {junction}", edge.0, edge.1)]
    PhaseEdgeNotAtJunction { junction: JunctionId, edge: Edge },
    #[error("schedule has no junctions")]
    NoJunctions,
}

/// Directed graph of unidirectional roads with the inlet/outlet/interior partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoadNetwork {
    ids: Vec<RoadId>,
    index: BTreeMap<RoadId, usize>,
    edges: BTreeSet<(usize, usize)>,
    in_nbrs: Vec<Vec<usize>>,
    out_nbrs: Vec<Vec<usize>>,
    inlets: Vec<usize>,
    outlets: Vec<usize>,
    interior: Vec<usize>,
}

/// Which partition block a road belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoadRole {
    Inlet,
    Outlet,
    Interior,
}

impl RoadNetwork {
    /// Builds the graph and derives the partition from neighbor emptiness.
    pub fn build(roads: &[RoadId], edges: &[Edge]) -> Result<Self, NetworkError> {
        if roads.is_empty() {
            return Err(NetworkError::Empty);
        }
        let mut ids = roads.to_vec();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(NetworkError::DuplicateRoadId(w[0]));
        }
        let index: BTreeMap<RoadId, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();

        let mut edge_set = BTreeSet::new();
        for &(a, b) in edges {
            let ia = *index.get(&a).ok_or(NetworkError::UnknownRoadId(a))?;
            let ib = *index.get(&b).ok_or(NetworkError::UnknownRoadId(b))?;
            if ia == ib {
                return Err(NetworkError::SelfLoop(a));
            }
            edge_set.insert((ia, ib));
        }
        for &(ia, ib) in &edge_set {
            if ia < ib && edge_set.contains(&(ib, ia)) {
                return Err(NetworkError::AntiparallelEdge(ids[ia], ids[ib]));
            }
        }

        let n = ids.len();
        let mut in_nbrs = vec![Vec::new(); n];
        let mut out_nbrs = vec![Vec::new(); n];
        for &(ia, ib) in &edge_set {
            out_nbrs[ia].push(ib);
            in_nbrs[ib].push(ia);
        }

        let mut inlets = Vec::new();
        let mut outlets = Vec::new();
        let mut interior = Vec::new();
        for i in 0..n {
            match (in_nbrs[i].is_empty(), out_nbrs[i].is_empty()) {
                (true, true) => return Err(NetworkError::IsolatedRoad(ids[i])),
                (true, false) => inlets.push(i),
                (false, true) => outlets.push(i),
                (false, false) => interior.push(i),
            }
        }

        Ok(Self {
            ids,
            index,
            edges: edge_set,
            in_nbrs,
            out_nbrs,
            inlets,
            outlets,
            interior,
        })
    }

    /// Number of roads `N`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Road ids in matrix order.
    pub fn road_ids(&self) -> &[RoadId] {
        &self.ids
    }

    pub fn road_id(&self, idx: usize) -> RoadId {
        self.ids[idx]
    }

    pub fn index_of(&self, id: RoadId) -> Result<usize, NetworkError> {
        self.index.get(&id).copied().ok_or(NetworkError::UnknownRoadId(id))
    }

    pub fn contains(&self, id: RoadId) -> bool {
        self.index.contains_key(&id)
    }

    /// Edges as id pairs, sorted by (tail index, head index).
    pub fn edges(&self) -> Vec<Edge> {
        self.edges.iter().map(|&(a, b)| (self.ids[a], self.ids[b])).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: RoadId, to: RoadId) -> bool {
        match (self.index.get(&from), self.index.get(&to)) {
            (Some(&a), Some(&b)) => self.edges.contains(&(a, b)),
            _ => false,
        }
    }

    pub(crate) fn has_edge_idx(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// In- and out-neighbors of road `id`, as ids in ascending order.
    pub fn neighbors(&self, id: RoadId) -> Result<(Vec<RoadId>, Vec<RoadId>), NetworkError> {
        let i = self.index_of(id)?;
        let map = |v: &[usize]| v.iter().map(|&k| self.ids[k]).collect();
        Ok((map(&self.in_nbrs[i]), map(&self.out_nbrs[i])))
    }

    pub fn in_neighbors_idx(&self, i: usize) -> &[usize] {
        &self.in_nbrs[i]
    }

    pub fn out_neighbors_idx(&self, i: usize) -> &[usize] {
        &self.out_nbrs[i]
    }

    /// Inlet road indices in ascending id order; column order of the input matrix.
    pub fn inlets(&self) -> &[usize] {
        &self.inlets
    }

    pub fn outlets(&self) -> &[usize] {
        &self.outlets
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn inlet_ids(&self) -> Vec<RoadId> {
        self.inlets.iter().map(|&i| self.ids[i]).collect()
    }

    pub fn outlet_ids(&self) -> Vec<RoadId> {
        self.outlets.iter().map(|&i| self.ids[i]).collect()
    }

    pub fn interior_ids(&self) -> Vec<RoadId> {
        self.interior.iter().map(|&i| self.ids[i]).collect()
    }

    pub fn role(&self, idx: usize) -> RoadRole {
        match (self.in_nbrs[idx].is_empty(), self.out_nbrs[idx].is_empty()) {
            (true, _) => RoadRole::Inlet,
            (false, true) => RoadRole::Outlet,
            (false, false) => RoadRole::Interior,
        }
    }

    pub fn is_outlet(&self, idx: usize) -> bool {
        self.out_nbrs[idx].is_empty()
    }
}

/// A junction and the roads declared incident to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Junction {
    pub id: JunctionId,
    pub roads: BTreeSet<RoadId>,
}

/// Set of junction edges given right-of-way together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovementPhase {
    pub junction: JunctionId,
    pub edges: BTreeSet<Edge>,
}

impl MovementPhase {
    pub fn new(junction: JunctionId, edges: impl IntoIterator<Item = Edge>) -> Self {
        Self {
            junction,
            edges: edges.into_iter().collect(),
        }
    }

    /// Roads discharging under this phase (edge tails).
    pub fn served_roads(&self) -> BTreeSet<RoadId> {
        self.edges.iter().map(|e| e.0).collect()
    }
}

/// Ordered phase rotation of one junction; repeated entries encode duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JunctionCycle {
    pub junction: Junction,
    pub phases: Vec<MovementPhase>,
}

impl JunctionCycle {
    /// Number of entries `r_i` in the rotation (repetitions included).
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Concurrent cyclic schedule over all junctions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSchedule {
    cycles: Vec<JunctionCycle>,
    cycle_length: usize,
}

/// The network-wide phase active at one time step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivePhase<'a> {
    /// `k mod n_c`.
    pub zeta: usize,
    /// `(k + 1) mod n_c`.
    pub gamma: usize,
    /// Active phase of each junction, in schedule order.
    pub phases: Vec<&'a MovementPhase>,
}

impl PhaseSchedule {
    /// Validates each cycle against `network` and computes the lcm cycle length.
    pub fn build(network: &RoadNetwork, cycles: Vec<JunctionCycle>) -> Result<Self, ScheduleError> {
        if cycles.is_empty() {
            return Err(ScheduleError::NoJunctions);
        }
        let mut seen = BTreeSet::new();
        for cycle in &cycles {
            let jid = cycle.junction.id;
            if !seen.insert(jid) {
                return Err(ScheduleError::DuplicateJunction(jid));
            }
            if cycle.phases.is_empty() {
                return Err(ScheduleError::EmptyCycle(jid));
            }
            if let Some(&road) = cycle.junction.roads.iter().find(|r| !network.contains(**r)) {
                return Err(ScheduleError::UnknownJunctionRoad { junction: jid, road });
            }
            for phase in &cycle.phases {
                for &edge in &phase.edges {
                    if phase.junction != jid {
                        return Err(ScheduleError::PhaseEdgeNotAtJunction { junction: jid, edge });
                    }
                    if !network.has_edge(edge.0, edge.1) {
                        return Err(ScheduleError::PhaseEdgeNotInNetwork { junction: jid, edge });
                    }
                    let roads = &cycle.junction.roads;
                    if !roads.contains(&edge.0) && !roads.contains(&edge.1) {
                        return Err(ScheduleError::PhaseEdgeNotAtJunction { junction: jid, edge });
                    }
                }
            }
        }
        let cycle_length = cycles.iter().fold(1usize, |acc, c| acc.lcm(&c.len()));
        Ok(Self { cycles, cycle_length })
    }

    /// Global period `n_c`.
    pub fn cycle_length(&self) -> usize {
        self.cycle_length
    }

    pub fn junction_count(&self) -> usize {
        self.cycles.len()
    }

    pub fn cycles(&self) -> &[JunctionCycle] {
        &self.cycles
    }

    /// Per-junction rotation lengths `r_i`.
    pub fn rotation_lengths(&self) -> Vec<usize> {
        self.cycles.iter().map(JunctionCycle::len).collect()
    }

    /// Phase of junction (schedule position) `j` at time `k`.
    pub fn local_phase(&self, j: usize, k: usize) -> &MovementPhase {
        let cycle = &self.cycles[j];
        &cycle.phases[k % cycle.len()]
    }

    pub fn active_phase(&self, k: usize) -> ActivePhase<'_> {
        let zeta = k % self.cycle_length;
        ActivePhase {
            zeta,
            gamma: (zeta + 1) % self.cycle_length,
            phases: (0..self.cycles.len()).map(|j| self.local_phase(j, zeta)).collect(),
        }
    }

    /// Whether `from -> to` is an edge of the network-wide cycle graph.
    pub fn is_valid_transition(&self, from: usize, to: usize) -> bool {
        from < self.cycle_length && to == (from + 1) % self.cycle_length
    }

    /// Road ids discharging under NOIR phase `zeta`.
    pub fn served_roads(&self, zeta: usize) -> BTreeSet<RoadId> {
        self.active_phase(zeta)
            .phases
            .iter()
            .flat_map(|p| p.served_roads())
            .collect()
    }

    /// Union of all edges given right-of-way under NOIR phase `zeta`.
    pub fn enabled_edges(&self, zeta: usize) -> BTreeSet<Edge> {
        self.active_phase(zeta)
            .phases
            .iter()
            .flat_map(|p| p.edges.iter().copied())
            .collect()
    }
}
