use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use env_logger::Env;

use noir_mpc::dynamics::stability_report;
use noir_mpc::harness::{export_csv, run, verdict_text, write_report, Trace};
use noir_mpc::scenario::{load_scenario, phoenix_scenario, Scenario};

/// Model predictive boundary control for signalized road networks.
#[derive(Parser)]
#[command(name = "noir-mpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop on a scenario file and write CSV output.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Number of control steps (overrides the file's `T`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        u0: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in Phoenix benchmark.
    Phoenix {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Load a scenario and run every consistency check; exit code 1 on failure.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print the spectral radius of every phase's state matrix.
    Stability {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn simulate_and_write(scenario: &Scenario, out: &Path) -> Result<bool> {
    let trace: Trace = run(scenario).context("closed-loop run failed to start")?;
    export_csv(&trace, out).with_context(|| format!("writing CSV output to {}", out.display()))?;
    write_report(scenario, &trace, out)?;
    scenario.save(out.join("scenario.json"))?;
    print!("{}", verdict_text(&trace));
    println!("output: {}", out.display());
    Ok(trace.completed() && trace.verdict.is_safe())
}

fn validate(path: &Path) -> Result<()> {
    let scenario = load_scenario(path)?;
    let report = stability_report(&scenario.phases)?;
    if !report.passes() {
        anyhow::bail!("a phase state matrix has spectral radius {} >= 1", report.max_radius());
    }
    println!(
        "ok: {} roads ({} inlets, {} outlets), {} junctions, cycle length {}",
        scenario.network.len(),
        scenario.network.inlets().len(),
        scenario.network.outlets().len(),
        scenario.schedule.junction_count(),
        scenario.schedule.cycle_length()
    );
    Ok(())
}

fn stability(path: &Path) -> Result<()> {
    let scenario = load_scenario(path)?;
    let report = stability_report(&scenario.phases)?;
    for (zeta, r) in report.radii.iter().enumerate() {
        println!("phase {zeta}: spectral radius {r:.12}");
    }
    println!("max: {:.12} ({})", report.max_radius(), if report.passes() { "stable" } else { "NOT stable" });
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter_or("NOIR_MPC_LOG", "error")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate {
            scenario,
            steps,
            out,
            beta,
            u0,
            eps,
            seed,
        } => load_scenario(&scenario)
            .map_err(anyhow::Error::from)
            .and_then(|s| Ok(s.with_overrides(steps, beta, u0, eps, seed)?))
            .and_then(|s| simulate_and_write(&s, &out)),
        Command::Phoenix { out, steps } => phoenix_scenario()
            .with_overrides(steps, None, None, None, None)
            .map_err(anyhow::Error::from)
            .and_then(|s| simulate_and_write(&s, &out)),
        Command::Validate { scenario } => validate(&scenario).map(|_| true),
        Command::Stability { scenario } => stability(&scenario).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
