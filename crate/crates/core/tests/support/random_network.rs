//! Random valid road networks and phase matrices.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use noir_mpc::dynamics::PhaseMatrices;
use noir_mpc::network::{Edge, Junction, JunctionCycle, MovementPhase, PhaseSchedule, RoadId, RoadNetwork};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Roads `1..=n`; the last `max(1, n/5)` are outlets, every other road has a
/// forward edge so it drains, and some backward edges create cycles.
pub fn random_network(rng: &mut ChaCha8Rng, n: usize) -> RoadNetwork {
    assert!(n >= 2);
    let outlets = (n / 5).max(1);
    let first_outlet = n - outlets;
    let mut edges: BTreeSet<Edge> = BTreeSet::new();
    for i in 0..first_outlet {
        let j = rng.gen_range(i + 1..n);
        edges.insert((i as RoadId + 1, j as RoadId + 1));
        for _ in 0..rng.gen_range(0..3) {
            let j = rng.gen_range(i + 1..n);
            edges.insert((i as RoadId + 1, j as RoadId + 1));
        }
    }
    for o in first_outlet..n {
        if !edges.iter().any(|e| e.1 == o as RoadId + 1) {
            let i = rng.gen_range(0..first_outlet.max(1));
            edges.insert((i as RoadId + 1, o as RoadId + 1));
        }
    }
    // backward edges between non-outlet roads, skipping antiparallel pairs
    for _ in 0..n / 3 {
        if first_outlet < 3 {
            break;
        }
        // road 1 keeps no in-edges so the network has an inlet
        let j = rng.gen_range(2..first_outlet);
        let i = rng.gen_range(1..j);
        let (from, to) = (j as RoadId + 1, i as RoadId + 1);
        if !edges.contains(&(to, from)) {
            edges.insert((from, to));
        }
    }
    let roads: Vec<RoadId> = (1..=n as RoadId).collect();
    let edges: Vec<Edge> = edges.into_iter().collect();
    RoadNetwork::build(&roads, &edges).expect("generator yields a valid network")
}

/// `p` uniform in `[0.05, 1]`, splits random over out-neighbors.
pub fn random_phase(rng: &mut ChaCha8Rng, net: &RoadNetwork) -> PhaseMatrices<f64> {
    let n = net.len();
    let p = DVector::from_fn(n, |_, _| rng.gen_range(0.05..=1.0));
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        let outs = net.out_neighbors_idx(i);
        if outs.is_empty() {
            continue;
        }
        let w: Vec<f64> = outs.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in outs.iter().zip(&w) {
            q[(j, i)] = wj / total;
        }
        // exact column sum
        let s = q.column(i).sum();
        q[(outs[0], i)] += 1.0 - s;
    }
    PhaseMatrices::from_parts(net, p, q).expect("generator yields valid phase matrices")
}

/// One junction holding every road with a rotation of `r1` phases and a
/// second one of `r2`, giving a cycle of `lcm(r1, r2)`.
pub fn two_junction_schedule(net: &RoadNetwork, r1: usize, r2: usize) -> PhaseSchedule {
    let roads: BTreeSet<RoadId> = net.road_ids().iter().copied().collect();
    let edges = net.edges();
    let cycle = |id, r: usize| JunctionCycle {
        junction: Junction { id, roads: roads.clone() },
        phases: (0..r)
            .map(|t| MovementPhase::new(id, edges.iter().copied().skip(t).step_by(r)))
            .collect(),
    };
    PhaseSchedule::build(net, vec![cycle(1, r1), cycle(2, r2)]).expect("valid schedule")
}
