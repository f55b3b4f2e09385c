//! Scenario files and the built-in Phoenix benchmark.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {
//!   "roads": [1, 2],
//!   "edges": [[1, 2]],
//!   "junctions": [{ "id": 1, "roads": [1, 2] }],
//!   "phases": [{ "junction": 1, "edges": [[1, 2]] }],
//!   "r": [1],
//!   "fd": { "z_max": 20, "rho_min": 20, "rho_mid": 40, "rho_max": 55 },
//!   "p_table": { "constant": { "1": 0.5, "2": 0.5 } },
//!   "u0": 4, "beta": 1, "T": 60
//! }
//! ```
//!
//! `phases` lists each junction's rotation in order; a phase repeated `d`
//! times holds for `d` steps. Optional keys: `notes`, `r`, `fd.per_road`,
//! `p_table`, `q_table`, `x0` (road id to density, default 0), `eps`
//! (default `0.05 u0`, or `1e-6` when `u0 = 0`), `hold_window` (default `n_c`), `seed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    build_phase_matrices, default_outflow_probs, DynamicsError, FdParams, FdProfile, OutflowDefaults, PhaseMatrices,
    SplitEntries,
};
use crate::network::{
    Edge, Junction, JunctionCycle, JunctionId, MovementPhase, NetworkError, PhaseSchedule, RoadId, RoadNetwork,
    ScheduleError,
};

pub const DEFAULT_BETA: f64 = 1.0;
/// Default liveness tolerance as a fraction of `u0`.
pub const DEFAULT_EPS_FRACTION: f64 = 0.05;
/// Liveness tolerance used when `u0 = 0` and none is given.
pub const ZERO_INFLOW_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {location}: {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },
    #[error("{path}: invalid network: {source}")]
    Network {
        path: String,
        #[source]
        source: NetworkError,
    },
    #[error("{path}: invalid schedule: {source}")]
    Schedule {
        path: String,
        #[source]
        source: ScheduleError,
    },
    #[error("{path}: invalid dynamics: {source}")]
    Dynamics {
        path: String,
        #[source]
        source: DynamicsError,
    },
}

/// Global fundamental diagram with optional per-road overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdSpec {
    pub z_max: f64,
    pub rho_min: f64,
    pub rho_mid: f64,
    pub rho_max: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_road: BTreeMap<RoadId, FdParams<f64>>,
}

impl FdSpec {
    pub fn global(&self) -> FdParams<f64> {
        FdParams {
            z_max: self.z_max,
            rho_min: self.rho_min,
            rho_mid: self.rho_mid,
            rho_max: self.rho_max,
        }
    }
}

/// Outflow probabilities per road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PTable {
    /// Derived from the schedule: served, waiting and outlet roads.
    Defaults(OutflowDefaults<f64>),
    /// Same probabilities in every phase.
    Constant(BTreeMap<RoadId, f64>),
    /// One map per NOIR phase, `n_c` entries.
    PerPhase(Vec<BTreeMap<RoadId, f64>>),
}

impl Default for PTable {
    fn default() -> Self {
        PTable::Defaults(OutflowDefaults::default())
    }
}

/// Share of `from`'s outflow entering `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub from: RoadId,
    pub to: RoadId,
    pub q: f64,
}

/// Explicit splits; roads without entries split uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QTable {
    Constant(Vec<SplitSpec>),
    PerPhase(Vec<Vec<SplitSpec>>),
}

/// On-disk scenario layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub roads: Vec<RoadId>,
    pub edges: Vec<Edge>,
    pub junctions: Vec<Junction>,
    pub phases: Vec<MovementPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<usize>>,
    pub fd: FdSpec,
    #[serde(default)]
    pub p_table: PTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_table: Option<QTable>,
    pub u0: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub x0: BTreeMap<RoadId, f64>,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_window: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

/// Validated scenario with every matrix built.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Source document with defaults filled in.
    pub spec: ScenarioFile,
    pub network: RoadNetwork,
    pub schedule: PhaseSchedule,
    /// Matrices of each NOIR phase, indexed by `zeta`.
    pub phases: Vec<PhaseMatrices<f64>>,
    pub fd: FdProfile<f64>,
    pub x0: DVector<f64>,
}

impl Scenario {
    pub fn u0(&self) -> f64 {
        self.spec.u0
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn eps(&self) -> f64 {
        self.spec.eps.expect("filled during validation")
    }

    pub fn hold_window(&self) -> usize {
        self.spec.hold_window.expect("filled during validation")
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("scenario serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Rebuilds with changed run parameters; `eps` follows `u0` unless given.
    pub fn with_overrides(
        &self,
        steps: Option<usize>,
        beta: Option<f64>,
        u0: Option<f64>,
        eps: Option<f64>,
        seed: Option<u64>,
    ) -> Result<Scenario, ScenarioError> {
        let mut spec = self.spec.clone();
        if let Some(t) = steps {
            spec.steps = t;
        }
        if let Some(b) = beta {
            spec.beta = b;
        }
        if let Some(u) = u0 {
            spec.u0 = u;
            if eps.is_none() {
                spec.eps = None;
            }
        }
        if let Some(e) = eps {
            spec.eps = Some(e);
        }
        if let Some(s) = seed {
            spec.seed = s;
        }
        Scenario::from_spec(spec, "<overrides>")
    }

    /// Validates a document and builds the network, schedule and phase matrices.
    pub fn from_spec(mut spec: ScenarioFile, path: &str) -> Result<Scenario, ScenarioError> {
        let field = |location: &str, message: String| ScenarioError::Parse {
            path: path.to_string(),
            location: format!("field `{location}`"),
            message,
        };
        let network = RoadNetwork::build(&spec.roads, &spec.edges).map_err(|source| ScenarioError::Network {
            path: path.to_string(),
            source,
        })?;

        let mut by_junction: BTreeMap<JunctionId, Vec<MovementPhase>> = BTreeMap::new();
        for phase in &spec.phases {
            if !spec.junctions.iter().any(|j| j.id == phase.junction) {
                return Err(field("phases", format!("phase refers to unknown junction {}", phase.junction)));
            }
            by_junction.entry(phase.junction).or_default().push(phase.clone());
        }
        let cycles: Vec<JunctionCycle> = spec
            .junctions
            .iter()
            .map(|j| JunctionCycle {
                junction: j.clone(),
                phases: by_junction.remove(&j.id).unwrap_or_default(),
            })
            .collect();
        if let Some(r) = &spec.r {
            if r.len() != cycles.len() {
                return Err(field("r", format!("{} entries for {} junctions", r.len(), cycles.len())));
            }
            for (i, (declared, cycle)) in r.iter().zip(&cycles).enumerate() {
                if *declared != cycle.len() {
                    return Err(field(
                        &format!("r[{i}]"),
                        format!(
                            "junction {} declares r = {declared} but lists {} phases",
                            cycle.junction.id,
                            cycle.len()
                        ),
                    ));
                }
            }
        }
        let schedule = PhaseSchedule::build(&network, cycles).map_err(|source| ScenarioError::Schedule {
            path: path.to_string(),
            source,
        })?;
        let nc = schedule.cycle_length();

        let dynamics = |source| ScenarioError::Dynamics {
            path: path.to_string(),
            source,
        };
        let global = spec.fd.global();
        global.validate().map_err(dynamics)?;
        let mut roads_fd = Vec::with_capacity(network.len());
        for &id in network.road_ids() {
            let fd = spec.fd.per_road.get(&id).copied().unwrap_or(global);
            fd.validate().map_err(dynamics)?;
            roads_fd.push(fd);
        }
        for id in spec.fd.per_road.keys() {
            if !network.contains(*id) {
                return Err(field("fd.per_road", format!("unknown road {id}")));
            }
        }
        let fd = FdProfile::from_roads(roads_fd).map_err(dynamics)?;

        let probs_at = |zeta: usize| -> Result<Vec<f64>, ScenarioError> {
            let map = match &spec.p_table {
                PTable::Defaults(d) => return Ok(default_outflow_probs(&network, &schedule, zeta, d)),
                PTable::Constant(m) => m,
                PTable::PerPhase(v) => {
                    if v.len() != nc {
                        return Err(field("p_table.per_phase", format!("{} entries for n_c = {nc}", v.len())));
                    }
                    &v[zeta]
                }
            };
            if let Some(id) = map.keys().find(|id| !network.contains(**id)) {
                return Err(field("p_table", format!("unknown road {id}")));
            }
            network
                .road_ids()
                .iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| field("p_table", format!("no outflow probability for road {id}")))
                })
                .collect()
        };
        let splits_at = |zeta: usize| -> Result<SplitEntries<f64>, ScenarioError> {
            let list: &[SplitSpec] = match &spec.q_table {
                None => &[],
                Some(QTable::Constant(v)) => v,
                Some(QTable::PerPhase(v)) => {
                    if v.len() != nc {
                        return Err(field("q_table.per_phase", format!("{} entries for n_c = {nc}", v.len())));
                    }
                    &v[zeta]
                }
            };
            Ok(list.iter().map(|s| ((s.from, s.to), s.q)).collect())
        };
        let mut phases = Vec::with_capacity(nc);
        for zeta in 0..nc {
            let probs = probs_at(zeta)?;
            let splits = splits_at(zeta)?;
            phases.push(build_phase_matrices(&network, &probs, &splits).map_err(dynamics)?);
        }

        if !(spec.u0 >= 0.0 && spec.u0.is_finite()) {
            return Err(field("u0", format!("must be non-negative, got {}", spec.u0)));
        }
        if !(spec.beta >= 0.0 && spec.beta.is_finite()) {
            return Err(field("beta", format!("must be non-negative, got {}", spec.beta)));
        }
        if spec.steps == 0 {
            return Err(field("T", "must be at least 1".to_string()));
        }
        let mut x0 = DVector::zeros(network.len());
        for (&id, &v) in &spec.x0 {
            let i = network
                .index_of(id)
                .map_err(|_| field("x0", format!("unknown road {id}")))?;
            let max = fd.road(i).rho_max;
            if !(v >= 0.0 && v <= max) {
                return Err(field(&format!("x0.{id}"), format!("{v} outside [0, {max}]")));
            }
            x0[i] = v;
        }
        let eps = spec.eps.unwrap_or(if spec.u0 > 0.0 {
            DEFAULT_EPS_FRACTION * spec.u0
        } else {
            ZERO_INFLOW_EPS
        });
        if !(eps > 0.0) {
            return Err(field("eps", format!("must be positive, got {eps}")));
        }
        spec.eps = Some(eps);
        let hold = spec.hold_window.unwrap_or(nc);
        if hold == 0 {
            return Err(field("hold_window", "must be at least 1".to_string()));
        }
        spec.hold_window = Some(hold);
        if spec.r.is_none() {
            spec.r = Some(schedule.rotation_lengths());
        }

        Ok(Scenario {
            spec,
            network,
            schedule,
            phases,
            fd,
            x0,
        })
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str, path: &str) -> Result<Scenario, ScenarioError> {
    let spec: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_string(),
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Scenario::from_spec(spec, path)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: shown.clone(),
        source,
    })?;
    parse_scenario(&text, &shown)
}

struct PhoenixJunction {
    id: JunctionId,
    /// Incoming roads in rotation order.
    incoming: &'static [RoadId],
    outgoing: &'static [RoadId],
}

const PHOENIX_JUNCTIONS: [PhoenixJunction; 14] = [
    PhoenixJunction { id: 1, incoming: &[1, 34, 52], outgoing: &[18, 33, 53] },
    PhoenixJunction { id: 2, incoming: &[48, 5, 60], outgoing: &[22, 29, 41] },
    PhoenixJunction { id: 3, incoming: &[47, 3, 29, 51], outgoing: &[20, 28, 32, 48] },
    PhoenixJunction { id: 4, incoming: &[9, 4, 28, 55], outgoing: &[15, 21, 36, 47] },
    PhoenixJunction { id: 5, incoming: &[25, 30, 43], outgoing: &[24, 44, 49] },
    PhoenixJunction { id: 6, incoming: &[38, 31, 56, 49], outgoing: &[30, 37, 50, 57] },
    PhoenixJunction { id: 7, incoming: &[27, 32, 45, 50], outgoing: &[26, 31, 46, 51] },
    PhoenixJunction { id: 8, incoming: &[24, 42, 6], outgoing: &[12, 23, 43] },
    PhoenixJunction { id: 9, incoming: &[23, 39, 7], outgoing: &[13, 42, 58] },
    PhoenixJunction { id: 10, incoming: &[33, 44, 10], outgoing: &[16, 25, 52] },
    PhoenixJunction { id: 11, incoming: &[26, 41, 8, 59], outgoing: &[14, 40, 45, 60] },
    PhoenixJunction { id: 12, incoming: &[2, 36, 46, 54], outgoing: &[19, 27, 35, 55] },
    PhoenixJunction { id: 13, incoming: &[35, 57, 53], outgoing: &[34, 38, 54] },
    PhoenixJunction { id: 14, incoming: &[37, 40, 11, 58], outgoing: &[17, 39, 56, 59] },
];

/// Opposite carriageways of the same street.
const PHOENIX_TWINS: [(RoadId, RoadId); 30] = [
    (1, 18), (2, 19), (3, 20), (4, 21), (5, 22), (6, 12), (7, 13), (8, 14), (9, 15), (10, 16),
    (11, 17), (23, 42), (24, 43), (25, 44), (26, 45), (27, 46), (28, 47), (29, 48), (30, 49),
    (31, 50), (32, 51), (33, 52), (34, 53), (35, 54), (36, 55), (37, 56), (38, 57), (39, 58),
    (40, 59), (41, 60),
];

/// U-turns permitted at junction 12.
const PHOENIX_U_TURNS: [Edge; 3] = [(36, 55), (54, 35), (46, 27)];

fn twin_of(road: RoadId) -> Option<RoadId> {
    PHOENIX_TWINS.iter().find_map(|&(a, b)| match road {
        r if r == a => Some(b),
        r if r == b => Some(a),
        _ => None,
    })
}

fn phoenix_movements(j: &PhoenixJunction, from: RoadId) -> Vec<Edge> {
    j.outgoing
        .iter()
        .filter(|&&to| twin_of(from) != Some(to) || PHOENIX_U_TURNS.contains(&(from, to)))
        .map(|&to| (from, to))
        .collect()
}

/// Table IV fundamental diagram.
pub fn phoenix_fd() -> FdSpec {
    FdSpec {
        z_max: 20.0,
        rho_min: 20.0,
        rho_mid: 40.0,
        rho_max: 55.0,
        per_road: BTreeMap::new(),
    }
}

/// Document form of the 60-road, 14-junction Phoenix benchmark.
pub fn phoenix_spec() -> ScenarioFile {
    let mut edges = Vec::new();
    let mut junctions = Vec::new();
    let mut phases = Vec::new();
    for j in &PHOENIX_JUNCTIONS {
        junctions.push(Junction {
            id: j.id,
            roads: j.incoming.iter().chain(j.outgoing).copied().collect(),
        });
        for &from in j.incoming {
            let movements = phoenix_movements(j, from);
            edges.extend(movements.iter().copied());
            phases.push(MovementPhase::new(j.id, movements));
        }
    }
    edges.sort_unstable();
    ScenarioFile {
        notes: vec![
            "Roads 1-11 are inlets, 12-22 outlets, 23-60 interior; ids follow the road table of the source network.".into(),
            "Each junction serves one incoming road per step in the listed rotation; a served road may turn into every outgoing road of its junction except its own reverse carriageway.".into(),
            "U-turns 36->55, 54->35 and 46->27 are kept at junction 12 as listed by the active-road table.".into(),
            "Several street names repeat with different ids (e.g. 23/24, 34/35); connectivity follows the active-road table, names are informational only.".into(),
            "Outflow probabilities and splits are not published; the documented defaults are used.".into(),
        ],
        roads: (1..=60).collect(),
        edges,
        junctions,
        phases,
        r: Some(PHOENIX_JUNCTIONS.iter().map(|j| j.incoming.len()).collect()),
        fd: phoenix_fd(),
        p_table: PTable::default(),
        q_table: None,
        u0: 50.0,
        beta: DEFAULT_BETA,
        x0: BTreeMap::new(),
        steps: 60,
        eps: Some(2.5),
        hold_window: Some(12),
        seed: 0,
    }
}

/// The Phoenix benchmark with default outflow probabilities and `x0 = 0`.
pub fn phoenix_scenario() -> Scenario {
    Scenario::from_spec(phoenix_spec(), "<phoenix>").expect("built-in Phoenix scenario is valid")
}
