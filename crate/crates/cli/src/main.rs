//! `optstop`: solve, train, simulate and inspect optimal-stopping defenders.
//!
//! Exit status is 0 on success, 1 on a domain error (one JSON line on stderr:
//! `{"error": kind, "message": text}`) and 2 on a usage error.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optstop_core::dists::DistsError;
use optstop_core::learner::LearnerError;
use optstop_core::policies::PolicyError;
use optstop_core::sim::SimError;
use optstop_core::solver::SolverError;
use serde_json::Value;
use thiserror::Error;

pub const OUTPUT_ENV: &str = "OPTSTOP_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dists(#[from] DistsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Report(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Solver(_) => "solver",
            Self::Sim(_) => "sim",
            Self::Learner(_) => "learner",
            Self::Policy(_) => "policy",
            Self::Dists(_) => "dists",
            Self::Io { .. } => "io",
            Self::Report(_) => "report",
            Self::Json(_) => "json",
            Self::Csv(_) => "csv",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "optstop", version, about = "Optimal-stopping intrusion prevention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file of flat dotted keys, e.g. {"env.p": 0.2}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = OUTPUT_ENV, default_value = "optstop-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset name or model file.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Extra dotted-key override, `key=value` (value parsed as JSON when possible).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact value iteration and threshold analysis.
    Solve {
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// PPO training with learning curves.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        /// `summary` or `belief`.
        #[arg(long)]
        input: Option<String>,
        /// Comma-separated seeds of independent runs.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        batch_steps: Option<usize>,
        #[arg(long)]
        eval_episodes: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Run episodes and export traces.
    Simulate(PolicyArgs),
    /// Run episodes and report metrics only.
    Evaluate(PolicyArgs),
    /// Stop probability of a policy over a grid.
    Probe {
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        policy_file: Option<PathBuf>,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
        #[arg(long)]
        z: Option<String>,
        #[arg(long)]
        t: Option<String>,
        #[arg(long)]
        beliefs: Option<usize>,
    },
    /// Estimate an observation model from a measurement CSV.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        /// `product` or `joint`.
        #[arg(long)]
        representation: Option<String>,
        #[arg(long)]
        smoothing: bool,
        #[arg(long)]
        max_phase: Option<u32>,
        /// `x,y,z` counter bounds.
        #[arg(long)]
        bounds: Option<String>,
    },
    /// Collect figure data from earlier result directories.
    Report {
        /// Result directories; defaults to the output directory.
        #[arg(long)]
        results: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    policy_file: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), serde_json::to_value(v).expect("serializable flag")));
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, Value)>, CliError> {
    let mut o = Vec::new();
    for s in &cli.common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        o.push((k.to_string(), config::parse_value(v)));
    }
    push(&mut o, "seed", cli.common.seed);
    push(&mut o, "model", cli.common.model.clone());
    match &cli.command {
        Command::Solve { grid, p, max_iterations } => {
            push(&mut o, "solver.belief_grid_size", *grid);
            push(&mut o, "env.p", *p);
            push(&mut o, "solver.max_iterations", *max_iterations);
        }
        Command::Train { iterations, input, seeds, batch_steps, eval_episodes, checkpoint_every } => {
            push(&mut o, "trainer.iterations", *iterations);
            push(&mut o, "trainer.input", input.clone());
            push(&mut o, "train.seeds", seeds.clone());
            push(&mut o, "trainer.batch_steps", *batch_steps);
            push(&mut o, "trainer.eval_episodes", *eval_episodes);
            push(&mut o, "train.checkpoint_every", *checkpoint_every);
        }
        Command::Simulate(a) | Command::Evaluate(a) => {
            push(&mut o, "sim.policy", a.policy.clone());
            push(&mut o, "sim.policy_file", a.policy_file.clone());
            push(&mut o, "sim.episodes", a.episodes);
        }
        Command::Probe { policy, policy_file, x, y, z, t, beliefs } => {
            push(&mut o, "sim.policy", policy.clone());
            push(&mut o, "sim.policy_file", policy_file.clone());
            push(&mut o, "probe.x", x.clone());
            push(&mut o, "probe.y", y.clone());
            push(&mut o, "probe.z", z.clone());
            push(&mut o, "probe.t", t.clone());
            push(&mut o, "probe.beliefs", *beliefs);
        }
        Command::Ingest { input, representation, smoothing, max_phase, bounds } => {
            push(&mut o, "ingest.input", input.clone());
            push(&mut o, "ingest.options.representation", representation.clone());
            if *smoothing {
                push(&mut o, "ingest.options.laplace_smoothing", Some(true));
            }
            push(&mut o, "ingest.options.max_phase", *max_phase);
            if let Some(b) = bounds {
                push(&mut o, "ingest.options.bounds", Some(config::parse_bounds(b)?));
            }
        }
        Command::Report { .. } => {}
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::resolve(cli.common.config.as_deref(), &overrides(&cli)?)?;
    let out = cli.common.out.clone();
    let started = std::time::Instant::now();
    let name = match &cli.command {
        Command::Solve { .. } => {
            commands::solve(&cfg, &out)?;
            "solve"
        }
        Command::Train { .. } => {
            commands::train(&cfg, &out)?;
            "train"
        }
        Command::Simulate(_) => {
            commands::simulate(&cfg, &out)?;
            "simulate"
        }
        Command::Evaluate(_) => {
            commands::evaluate(&cfg, &out)?;
            "evaluate"
        }
        Command::Probe { .. } => {
            commands::probe(&cfg, &out)?;
            "probe"
        }
        Command::Ingest { .. } => {
            commands::ingest(&cfg, &out)?;
            "ingest"
        }
        Command::Report { results } => {
            let dirs = if results.is_empty() { vec![out.clone()] } else { results.clone() };
            report::emit(&dirs, &out)?;
            "report"
        }
    };
    commands::write_meta(&out, name, started.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            if matches!(e, CliError::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
