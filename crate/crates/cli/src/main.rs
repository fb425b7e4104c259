//! `riskd` — experiment runner and oracle solver for risk-averse
//! temporal-difference learning on finite MDPs.
//!
//! Exit codes: 0 on success, 2 on config errors, 3 on numerical failures.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use riskd_core::error::Error;
use riskd_core::harness::{run_experiment, ExperimentConfig};
use riskd_core::markov::MarkovChain;
use riskd_core::projection::{solve_multistep, solve_single_step, FeatureModel};
use riskd_core::risk::RiskMapping;
use riskd_core::td::{validate_schedule, StepsizeSchedule};

#[derive(Parser)]
#[command(name = "riskd", version, about = "Risk-averse TD learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write results.csv / summary.json.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
        /// Output directory (default: config's "output" field, then ./riskd-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for replications.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Also emit a minimal SVG line chart.
        #[arg(long)]
        svg: bool,
    },
    /// Solve a projected equation exactly and print the solution as JSON.
    Solve {
        /// MDP-under-policy file: {"n":..,"alpha":..,"P":[[..]],"c":[..]}.
        mdp: PathBuf,
        /// Feature file: {"Phi": [[..]]}.
        features: PathBuf,
        /// Risk mapping file: {"kind":..., ...}.
        risk: PathBuf,
        /// Trace parameter; 0 solves the single-step equation.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Proceed even when the contraction condition fails.
        #[arg(long)]
        override_contraction: bool,
        /// Solver tolerance.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Spot-check the stepsize conditions of a schedule over a horizon.
    CheckSchedule {
        /// Schedule file: {"a":..,"b":..,"p":..} (p defaults to 1).
        schedule: PathBuf,
        #[arg(long)]
        horizon: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cli: Cli) -> riskd_core::Result<()> {
    match cli.command {
        Command::Run { config, out, seed, parallel, svg } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seed = Some(s);
            }
            let out_dir = out
                .or_else(|| cfg.output.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("riskd-out"));
            let summary = run_experiment(&cfg, &out_dir, parallel, svg)?;
            println!("{}", serde_json::to_string_pretty(&json!({
                "out_dir": out_dir,
                "aggregate": summary["aggregate"],
                "distortion": summary["distortion"],
            }))?);
            Ok(())
        }
        Command::Solve { mdp, features, risk, lambda, override_contraction, tol } => {
            let chain = MarkovChain::from_json(&read(&mdp)?)?;
            let sd = chain.stationary_distribution(1e-12)?;
            let fm = FeatureModel::from_json(&read(&features)?, &sd)?;
            let mapping: RiskMapping = serde_json::from_str(&read(&risk)?)
                .map_err(|e| Error::Config(format!("risk file: {e}")))?;
            mapping.validate()?;
            let report = mapping.distortion_coefficient(chain.transition_matrix(), chain.alpha())?;
            let solution = if lambda == 0.0 {
                solve_single_step(&fm, &chain, &mapping, tol, 200_000, override_contraction)?
            } else {
                solve_multistep(
                    &fm,
                    &chain,
                    &mapping,
                    lambda,
                    None,
                    tol,
                    5_000_000,
                    override_contraction,
                )?
            };
            let mut out = solution.to_json();
            out["kappa"] = json!(report.kappa);
            out["condition_td0"] = json!(report.condition_td0);
            out["condition_tdlambda"] = json!(report.condition_tdlambda);
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::CheckSchedule { schedule, horizon } => {
            let s: StepsizeSchedule = serde_json::from_str(&read(&schedule)?)
                .map_err(|e| Error::Config(format!("schedule file: {e}")))?;
            let report = validate_schedule(&s, horizon)?;
            let mut v = serde_json::to_value(&report)?;
            v["passed"] = json!(report.passed());
            v["failed_conditions"] = json!(report.failed_conditions());
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(())
        }
    }
}

fn read(path: &PathBuf) -> riskd_core::Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}
