//! Closed-loop runs (plant + controller + monitor) and their file output.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{outflows, step, TrafficState};
use crate::monitor::{check_liveness, Liveness, SafetyMonitor, TraceRecord, Verdict};
use crate::mpc::{MpcConfig, MpcController, MpcError};
use crate::scenario::{Scenario, ScenarioFile};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Controller(#[from] MpcError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("cannot export an empty trace")]
    EmptyTrace,
}

/// Solver statistics of one control step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpStats {
    pub k: usize,
    pub iterations: usize,
    pub kkt_max: f64,
    pub wall_time_s: f64,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped at step `k`; records before `k` (and the record of `k`
    /// when the plant step failed) are kept.
    Aborted { k: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<TraceRecord<f64>>,
    /// State after the last recorded step.
    pub final_state: DVector<f64>,
    pub verdict: Verdict,
    pub qp_stats: Vec<QpStats>,
    pub status: RunStatus,
    pub inlet_ids: Vec<u32>,
    pub road_ids: Vec<u32>,
}

impl Trace {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Runs the closed loop for the scenario's `T` steps.
pub fn run(scenario: &Scenario) -> Result<Trace, HarnessError> {
    let config = MpcConfig::new(scenario.beta(), scenario.u0());
    let mut controller = MpcController::new(
        scenario.network.clone(),
        scenario.schedule.clone(),
        scenario.phases.clone(),
        scenario.fd.clone(),
        config,
    )?;
    let network = &scenario.network;
    let nc = scenario.schedule.cycle_length();
    let mut state = TrafficState::new(scenario.x0.clone(), 0);
    let mut records = Vec::with_capacity(scenario.steps());
    let mut qp_stats = Vec::with_capacity(scenario.steps());
    let mut status = RunStatus::Completed;

    for k in 0..scenario.steps() {
        let started = Instant::now();
        let control = match controller.solve_step(&state) {
            Ok(c) => c,
            Err(e) => {
                log::error!("controller failed at k = {k}: {e}");
                status = RunStatus::Aborted {
                    k,
                    reason: e.to_string(),
                };
                break;
            }
        };
        qp_stats.push(QpStats {
            k,
            iterations: control.solution.iterations,
            kkt_max: control.solution.kkt.max(),
            wall_time_s: started.elapsed().as_secs_f64(),
            used_fallback: control.solution.used_fallback,
        });
        let mats = &scenario.phases[k % nc];
        let z = outflows(&state, mats);
        let outlet_outflow_sum = network.outlets().iter().map(|&i| z[i]).sum();
        records.push(TraceRecord {
            k,
            x: state.x.clone(),
            u: control.inflow.clone(),
            z,
            zeta: k % nc,
            gamma: (k + 1) % nc,
            outlet_outflow_sum,
        });
        log::info!("k={k} total_density={:.6} outlet_outflow={:.6}", state.total(), outlet_outflow_sum);
        match step(network, &state, mats, controller.input(), &control.inflow, &scenario.fd) {
            Ok(next) => state = next,
            Err(e) => {
                log::error!("plant step failed at k = {k}: {e}");
                status = RunStatus::Aborted {
                    k,
                    reason: e.to_string(),
                };
                break;
            }
        }
    }

    let road_ids = network.road_ids().to_vec();
    let inlet_ids = network.inlet_ids();
    let monitor = SafetyMonitor::new(&road_ids, &inlet_ids, &scenario.fd, scenario.u0(), nc);
    let safety_violations = monitor.check_trace(&records);
    let liveness = if records.is_empty() {
        Liveness::NotYetSatisfied
    } else {
        check_liveness(&records, scenario.u0(), scenario.eps(), scenario.hold_window())
            .expect("scenario validation guarantees positive eps and hold window")
    };
    let verdict = Verdict {
        safety_violations,
        liveness,
        epsilon: scenario.eps(),
        hold_window: scenario.hold_window(),
    };
    Ok(Trace {
        records,
        final_state: state.x,
        verdict,
        qp_stats,
        status,
        inlet_ids,
        road_ids,
    })
}

/// `%g`-style rendering with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_table(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<(), HarnessError> {
    let shown = path.display().to_string();
    let csv_err = |source| HarnessError::Csv {
        path: shown.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: shown.clone(),
        source,
    })
}

/// Human-readable verdict summary.
pub fn verdict_text(trace: &Trace) -> String {
    let v = &trace.verdict;
    let mut out = String::new();
    match &trace.status {
        RunStatus::Completed => out.push_str(&format!("status: completed ({} steps)\n", trace.records.len())),
        RunStatus::Aborted { k, reason } => out.push_str(&format!("status: aborted at k={k}: {reason}\n")),
    }
    out.push_str(&format!("safety: {} violation(s)\n", v.safety_violations.len()));
    for s in &v.safety_violations {
        let road = s.road.map(|r| r.to_string()).unwrap_or_else(|| "-".to_string());
        out.push_str(&format!("  k={} atom={} road={} margin={}\n", s.k, s.atom, road, format_sig9(s.margin)));
    }
    match v.liveness {
        Liveness::SatisfiedAt(k) => out.push_str(&format!("liveness: satisfied at k={k}")),
        Liveness::NotYetSatisfied => out.push_str("liveness: not yet satisfied"),
    }
    out.push_str(&format!(" (eps={}, hold_window={})\n", format_sig9(v.epsilon), v.hold_window));
    out
}

/// Writes `inflows.csv`, `outflows.csv`, `density.csv` and `verdict.txt`.
pub fn export_csv(trace: &Trace, out_dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    if trace.records.is_empty() {
        return Err(HarnessError::EmptyTrace);
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let header = |prefix: &str, ids: &[u32]| -> Vec<String> {
        std::iter::once("k".to_string())
            .chain(ids.iter().map(|id| format!("{prefix}_{id}")))
            .collect()
    };
    let row = |k: usize, values: &DVector<f64>| -> Vec<String> {
        std::iter::once(k.to_string())
            .chain(values.iter().map(|&v| format_sig9(v)))
            .collect()
    };

    write_table(
        &dir.join("inflows.csv"),
        header("u", &trace.inlet_ids),
        trace.records.iter().map(|r| row(r.k, &r.u)),
    )?;
    write_table(
        &dir.join("outflows.csv"),
        header("z", &trace.road_ids),
        trace.records.iter().map(|r| row(r.k, &r.z)),
    )?;
    let mut density_header = header("rho", &trace.road_ids);
    density_header.push("total".to_string());
    write_table(
        &dir.join("density.csv"),
        density_header,
        trace.records.iter().map(|r| {
            let mut cells = row(r.k, &r.x);
            cells.push(format_sig9(r.x.sum()));
            cells
        }),
    )?;
    let verdict_path = dir.join("verdict.txt");
    fs::write(&verdict_path, verdict_text(trace)).map_err(|source| HarnessError::Io {
        path: verdict_path.display().to_string(),
        source,
    })
}

#[derive(Serialize)]
struct Report<'a> {
    scenario: &'a ScenarioFile,
    status: &'a RunStatus,
    verdict: &'a Verdict,
    steps_recorded: usize,
    max_density: f64,
    max_total_density: f64,
    qp: &'a [QpStats],
}

/// `report.json`: the scenario with defaults filled in, verdict and solver statistics.
pub fn write_report(scenario: &Scenario, trace: &Trace, out_dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let report = Report {
        scenario: &scenario.spec,
        status: &trace.status,
        verdict: &trace.verdict,
        steps_recorded: trace.records.len(),
        max_density: trace.records.iter().map(|r| r.x.max()).fold(0.0, f64::max),
        max_total_density: trace.records.iter().map(|r| r.x.sum()).fold(0.0, f64::max),
        qp: &trace.qp_stats,
    };
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    const TWO_ROAD: &str = r#"{
        "roads": [1, 2],
        "edges": [[1, 2]],
        "junctions": [{ "id": 1, "roads": [1, 2] }],
        "phases": [{ "junction": 1, "edges": [[1, 2]] }],
        "fd": { "z_max": 20, "rho_min": 20, "rho_mid": 40, "rho_max": 55 },
        "p_table": { "constant": { "1": 0.5, "2": 0.5 } },
        "u0": 4,
        "T": 60
    }"#;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(50.0), "50");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456.789012), "123456.789");
        assert_eq!(format_sig9(-2.5e-7), "-2.5e-07");
        assert_eq!(format_sig9(1.234e12), "1.234e+12");
        assert_eq!(format_sig9(0.0001), "0.0001");
    }

    #[test]
    fn two_road_chain_reaches_fixed_point() {
        let s = parse_scenario(TWO_ROAD, "t").unwrap();
        let trace = run(&s).unwrap();
        assert!(trace.completed());
        assert!(trace.verdict.is_safe());
        assert!(trace.verdict.is_live());
        assert!((trace.final_state[0] - 8.0).abs() < 1e-6);
        assert!((trace.final_state[1] - 8.0).abs() < 1e-6);
    }

    #[test]
    fn zero_inflow_from_empty_network() {
        let s = parse_scenario(&TWO_ROAD.replace("\"u0\": 4", "\"u0\": 0"), "t").unwrap();
        let trace = run(&s).unwrap();
        assert!(trace.records.iter().all(|r| r.x.amax() == 0.0 && r.u.amax() == 0.0));
        assert_eq!(trace.verdict.liveness, Liveness::SatisfiedAt(0));
    }

    #[test]
    fn csv_layout() {
        let s = parse_scenario(&TWO_ROAD.replace("\"T\": 60", "\"T\": 1"), "t").unwrap();
        let trace = run(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(&trace, dir.path()).unwrap();
        write_report(&s, &trace, dir.path()).unwrap();
        for name in ["inflows.csv", "outflows.csv", "density.csv"] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(text.lines().count(), 2, "{name}");
        }
        let density = fs::read_to_string(dir.path().join("density.csv")).unwrap();
        assert_eq!(density.lines().next().unwrap(), "k,rho_1,rho_2,total");
        assert!(fs::read_to_string(dir.path().join("verdict.txt")).unwrap().contains("safety: 0"));
        assert!(dir.path().join("report.json").exists());
    }
}
