mod support;

use nalgebra::{DMatrix, DVector};
use noir_mpc::dynamics::{
    spectral_radius_nonneg, stability_report, step, FdParams, FdProfile, InputMatrix, PhaseMatrices, TrafficState,
};
use noir_mpc::harness::{export_csv, run};
use noir_mpc::monitor::{liveness_of_sums, Liveness};
use noir_mpc::mpc::{build_cost, build_prediction};
use noir_mpc::network::{Junction, JunctionCycle, MovementPhase, PhaseSchedule, RoadNetwork};
use noir_mpc::scenario::parse_scenario;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::random_network::{random_network, random_phase, two_junction_schedule};

fn loose_fd(n: usize) -> FdProfile<f64> {
    FdProfile::uniform(FdParams::new(1e6, 1.0, 2.0, 1e9).unwrap(), n)
}

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(0.0..50.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_balance(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, n);
        let mats = random_phase(&mut rng, &net);
        let input = InputMatrix::build(&net);
        let x = TrafficState::new(random_state(&mut rng, n), 0);
        let u = DVector::from_fn(input.inputs(), |_, _| rng.gen_range(0.0..10.0));
        let next = step(&net, &x, &mats, &input, &u, &loose_fd(n)).unwrap();
        let z = x.x.component_mul(mats.outflow_probs());
        let out: f64 = net.outlets().iter().map(|&i| z[i]).sum();
        let residual = next.total() - x.total() - u.sum() + out;
        prop_assert!(residual.abs() <= 1e-9, "residual {residual:e}");
    }

    #[test]
    fn matrix_step_matches_road_balance(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, n);
        let mats = random_phase(&mut rng, &net);
        let input = InputMatrix::build(&net);
        let x = random_state(&mut rng, n);
        let u = DVector::from_fn(input.inputs(), |_, _| rng.gen_range(0.0..10.0));
        let next = step(&net, &TrafficState::new(x.clone(), 3), &mats, &input, &u, &loose_fd(n)).unwrap();
        prop_assert_eq!(next.k, 4);
        let p = mats.outflow_probs();
        for i in 0..n {
            let inflow: f64 = net.in_neighbors_idx(i).iter().map(|&j| mats.q()[(i, j)] * p[j] * x[j]).sum();
            let boundary = input.inlet_rows().iter().position(|&r| r == i).map_or(0.0, |c| u[c]);
            let expected = x[i] - p[i] * x[i] + inflow + boundary;
            prop_assert!((next.x[i] - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn densities_stay_nonnegative(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, n);
        let mats = random_phase(&mut rng, &net);
        let input = InputMatrix::build(&net);
        let mut state = TrafficState::new(random_state(&mut rng, n), 0);
        for _ in 0..10 {
            let u = DVector::from_fn(input.inputs(), |_, _| rng.gen_range(0.0..5.0));
            state = step(&net, &state, &mats, &input, &u, &loose_fd(n)).unwrap();
            prop_assert!(state.x.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn valid_phases_are_schur_stable(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, n);
        let phases: Vec<_> = (0..3).map(|_| random_phase(&mut rng, &net)).collect();
        let report = stability_report(&phases).unwrap();
        prop_assert!(report.passes(), "max radius {}", report.max_radius());
    }

    #[test]
    fn spectral_radius_matches_eigen_decomposition(seed in any::<u64>(), n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, n);
        let mats = random_phase(&mut rng, &net);
        let ours = spectral_radius_nonneg(mats.a(), 1e-12, 100_000).unwrap();
        let reference = mats.a().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        prop_assert!((ours - reference).abs() < 1e-6, "{ours} vs {reference}");
    }

    #[test]
    fn schedule_repeats_every_cycle(r in proptest::collection::vec(1usize..6, 1..5), k in 0usize..500) {
        let n = r.len() + 1;
        let roads: Vec<u32> = (1..=n as u32).collect();
        let edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (i, i + 1)).collect();
        let net = RoadNetwork::build(&roads, &edges).unwrap();
        let cycles = r
            .iter()
            .enumerate()
            .map(|(j, &len)| {
                let id = j as u32 + 1;
                JunctionCycle {
                    junction: Junction { id, roads: [id, id + 1].into_iter().collect() },
                    phases: (0..len)
                        .map(|t| MovementPhase::new(id, if t == 0 { vec![(id, id + 1)] } else { vec![] }))
                        .collect(),
                }
            })
            .collect();
        let schedule = PhaseSchedule::build(&net, cycles).unwrap();
        let nc = schedule.cycle_length();
        prop_assert!(r.iter().all(|&ri| nc % ri == 0));
        prop_assert!((1..nc).all(|c| !r.iter().all(|&ri| c % ri == 0)));
        prop_assert_eq!(schedule.active_phase(k), schedule.active_phase(k + nc));
        prop_assert_eq!(schedule.active_phase(k).gamma, schedule.active_phase(k + 1).zeta);
    }

    #[test]
    fn prediction_and_cost_match_rollout(seed in any::<u64>(), n in 2usize..15, r1 in 1usize..4, r2 in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, n);
        let schedule = two_junction_schedule(&net, r1, r2);
        let nc = schedule.cycle_length();
        let phases: Vec<PhaseMatrices<f64>> = (0..nc).map(|_| random_phase(&mut rng, &net)).collect();
        let input = InputMatrix::build(&net);
        let k = rng.gen_range(0..3 * nc);
        let pred = build_prediction(&schedule, &phases, &input, k).unwrap();
        let x = random_state(&mut rng, n);
        let m = input.inputs();
        let u = DVector::from_fn(m * nc, |_, _| rng.gen_range(0.0..10.0));
        let beta = rng.gen_range(0.0..3.0);

        let mut state = TrafficState::new(x.clone(), k);
        let mut cost = 0.0;
        let mut rollout = Vec::new();
        for j in 0..nc {
            let uj = u.rows(j * m, m).into_owned();
            state = step(&net, &state, &phases[(k + j) % nc], &input, &uj, &loose_fd(n)).unwrap();
            cost += uj.norm_squared() + beta * state.x.norm_squared();
            rollout.extend(state.x.iter().copied());
        }
        let predicted = pred.predict(&x, &u);
        let gap = (predicted - DVector::from_vec(rollout)).amax();
        prop_assert!(gap < 1e-9, "gap {gap:e}");
        let terms = build_cost(&pred, &x, beta).unwrap();
        prop_assert!((terms.horizon_cost(&u) - cost).abs() <= 1e-8 * cost.max(1.0));
        let w1_min = terms.w1.clone().symmetric_eigenvalues().min();
        prop_assert!(w1_min >= 1.0 - 1e-9);
    }

    #[test]
    fn larger_eps_never_delays_liveness(sums in proptest::collection::vec(0.0f64..100.0, 1..80), eps in 0.1f64..20.0, extra in 0.0f64..20.0, hold in 1usize..13) {
        let rank = |l: Liveness| match l { Liveness::SatisfiedAt(k) => k, Liveness::NotYetSatisfied => usize::MAX };
        let a = rank(liveness_of_sums(&sums, 50.0, eps, hold).unwrap());
        let b = rank(liveness_of_sums(&sums, 50.0, eps + extra, hold).unwrap());
        prop_assert!(b <= a);
    }
}

#[test]
fn prediction_is_periodic_in_start_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_network(&mut rng, 12);
    let schedule = two_junction_schedule(&net, 2, 3);
    let phases: Vec<_> = (0..6).map(|_| random_phase(&mut rng, &net)).collect();
    let input = InputMatrix::build(&net);
    for k in 0..6 {
        let a = build_prediction(&schedule, &phases, &input, k).unwrap();
        let b = build_prediction(&schedule, &phases, &input, k + 6).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn single_precision_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = random_network(&mut rng, 8);
    let schedule = two_junction_schedule(&net, 2, 1);
    let phases64: Vec<_> = (0..2).map(|_| random_phase(&mut rng, &net)).collect();
    let phases32: Vec<PhaseMatrices<f32>> = phases64
        .iter()
        .map(|p| PhaseMatrices::from_parts(&net, p.outflow_probs().clone().cast(), p.q().clone().cast()).unwrap())
        .collect();
    let pred64 = build_prediction(&schedule, &phases64, &InputMatrix::build(&net), 0).unwrap();
    let pred32 = build_prediction(&schedule, &phases32, &InputMatrix::<f32>::build(&net), 0).unwrap();
    let diff: DMatrix<f64> = pred32.g2.cast::<f64>() - &pred64.g2;
    assert!(diff.amax() < 1e-5);
}

#[test]
fn identical_scenarios_give_identical_files() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/two_road.json")).unwrap();
    let s = parse_scenario(&text, "two_road.json").unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        export_csv(&run(&s).unwrap(), d.path()).unwrap();
    }
    for name in ["inflows.csv", "outflows.csv", "density.csv", "verdict.txt"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn close_leading_eigenvalues_still_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(18110560077020405146);
    let net = random_network(&mut rng, 36);
    for _ in 0..3 {
        let mats = random_phase(&mut rng, &net);
        let ours = spectral_radius_nonneg(mats.a(), 1e-10, 10_000).unwrap();
        let reference = mats.a().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!((ours - reference).abs() < 1e-8, "{ours} vs {reference}");
        assert!(ours < 1.0);
    }
}
