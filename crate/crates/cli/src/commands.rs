//! Subcommand bodies. Each writes its data files into the output directory
//! with the resolved config embedded; wall-clock time goes to `meta.json`
//! only, so data files are reproducible byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use optstop_core::dists::{ingest_model, save_model};
use optstop_core::learner::{train_with, write_curve_csv, CurveRecord};
use optstop_core::policies::{alert_rank_correlation, probe_beliefs, probe_grid, Policy, PolicyKind, ProbeGrid};
use optstop_core::sim::{run_batch, write_batch_json, write_episodes_csv, Metrics};
use optstop_core::solver::{lemma1_threshold, solve as solve_mdp, AlphaVector};
use optstop_core::{BeliefMdp, BeliefState};
use serde::Serialize;

use crate::config::{parse_range, RunConfig};
use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_meta(out: &Path, command: &str, seconds: f64) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Meta<'a> {
        command: &'a str,
        version: &'a str,
        wall_clock_seconds: f64,
    }
    write_json(&out.join("meta.json"), &Meta { command, version: env!("CARGO_PKG_VERSION"), wall_clock_seconds: seconds })
}

fn load_policy(cfg: &RunConfig) -> Result<PolicyKind, CliError> {
    match &cfg.sim.policy_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(PolicyKind::parse(&cfg.sim.policy)?),
    }
}

#[derive(Serialize)]
struct SolveDoc<'a> {
    config: &'a RunConfig,
    alpha_star: f64,
    stopping_set: (f64, f64),
    value_at_0: f64,
    value_at_1: f64,
    converged: bool,
    iterations: usize,
    residual: f64,
    alpha_vectors: &'a [AlphaVector],
}

/// `solve.json` and `threshold_curve.csv` (`b1,margin,value,stop`).
pub fn solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let env = cfg.env()?;
    let mdp = BeliefMdp::new(env.transition, env.rewards, &env.observations)?;
    let (v, analysis) = solve_mdp(&mdp, &cfg.solver)?;
    // the threshold at alpha* itself, as a cross-check in the bundle
    lemma1_threshold(&v, &mdp, BeliefState::new(analysis.alpha_star).expect("alpha in [0,1]"))?;
    let doc = SolveDoc {
        config: cfg,
        alpha_star: analysis.alpha_star,
        stopping_set: analysis.stopping_set,
        value_at_0: v.value_at(BeliefState::NO_INTRUSION),
        value_at_1: v.value_at(BeliefState::INTRUSION),
        converged: v.converged,
        iterations: v.horizon_used,
        residual: v.residual,
        alpha_vectors: v.vectors(),
    };
    ensure_dir(out)?;
    let path = out.join("threshold_curve.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["b1", "margin", "value", "stop"])?;
    for c in &analysis.curve {
        w.write_record([c.b1.to_string(), c.margin.to_string(), c.value.to_string(), u8::from(c.stop).to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;
    write_json(&out.join("solve.json"), &doc)
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("train_seed{seed}"))
}

#[derive(Serialize)]
struct TrainRun {
    seed: u64,
    directory: String,
    final_iteration: usize,
    final_metrics: Option<Metrics>,
}

/// One directory per seed with `policy.json`, `learning_curve.csv` and
/// optional `checkpoints/iter_K.json`; `train.json` lists the runs.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let env = cfg.env()?;
    let seeds = if cfg.train.seeds.is_empty() { vec![cfg.seed] } else { cfg.train.seeds.clone() };
    let mut runs = Vec::new();
    for &seed in &seeds {
        let dir = run_dir(out, seed);
        ensure_dir(&dir)?;
        let trainer = optstop_core::learner::TrainerConfig { seed, ..cfg.trainer.clone() };
        let every = cfg.train.checkpoint_every;
        let mut checkpoint_error = None;
        let outcome = train_with(&env, &trainer, |rec: &CurveRecord, policy| {
            if every > 0 && rec.iteration % every == 0 && checkpoint_error.is_none() {
                let path = dir.join("checkpoints").join(format!("iter_{}.json", rec.iteration));
                let kind = PolicyKind::Neural(Box::new(policy.clone()));
                checkpoint_error = write_json(&path, &kind).err();
            }
        })?;
        if let Some(e) = checkpoint_error {
            return Err(e);
        }
        let path = dir.join("learning_curve.csv");
        let mut w = create(&path)?;
        write_curve_csv(&mut w, &outcome.curve)?;
        w.flush().map_err(io_err(&path))?;
        write_json(&dir.join("policy.json"), &PolicyKind::Neural(Box::new(outcome.policy)))?;
        runs.push(TrainRun {
            seed,
            directory: dir.file_name().unwrap().to_string_lossy().into_owned(),
            final_iteration: outcome.curve.len(),
            final_metrics: outcome.curve.last().map(|r| r.policy),
        });
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a RunConfig,
        runs: Vec<TrainRun>,
    }
    write_json(&out.join("train.json"), &Doc { config: cfg, runs })
}

/// `simulate.json` (config, metrics, per-episode summaries) and `episodes.csv`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let env = cfg.env()?;
    let policy = load_policy(cfg)?;
    let (traces, metrics) = run_batch(&policy, &env, episodes(cfg)?, cfg.seed)?;
    let path = out.join("simulate.json");
    let mut w = create(&path)?;
    write_batch_json(&mut w, cfg, &traces, &metrics)?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    let path = out.join("episodes.csv");
    let mut w = create(&path)?;
    write_episodes_csv(&mut w, &traces)?;
    w.flush().map_err(io_err(&path))
}

fn episodes(cfg: &RunConfig) -> Result<usize, CliError> {
    if cfg.sim.episodes == 0 {
        return Err(CliError::Config("sim.episodes must be at least 1".into()));
    }
    Ok(cfg.sim.episodes)
}

/// `evaluate.json`; the metrics also go to stdout as one JSON line.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let env = cfg.env()?;
    let policy = load_policy(cfg)?;
    let (_, metrics) = run_batch(&policy, &env, episodes(cfg)?, cfg.seed)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a RunConfig,
        policy: &'a str,
        metrics: Metrics,
    }
    write_json(&out.join("evaluate.json"), &Doc { config: cfg, policy: policy.name(), metrics })?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

/// Summary policies: `probe.csv` (`x,y,z,t,stop_prob,stop_log_odds`) plus the
/// per-slice rank correlation in `probe.json`. Belief policies:
/// `probe_beliefs.csv` (`b1,stop_prob`).
pub fn probe(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let policy = load_policy(cfg)?;
    #[derive(Serialize)]
    struct Slice {
        t: u32,
        alert_rank_correlation: Option<f64>,
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a RunConfig,
        policy: &'a str,
        slices: Vec<Slice>,
    }
    let mut slices = Vec::new();
    if policy.requires().belief {
        let n = cfg.probe.beliefs.max(2);
        let grid: Vec<f64> = (0..n).map(|i| if i + 1 == n { 1.0 } else { i as f64 / (n - 1) as f64 }).collect();
        let rows = probe_beliefs(&policy, &grid)?;
        let path = out.join("probe_beliefs.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["b1", "stop_prob"])?;
        for (b, q) in rows {
            w.write_record([b.to_string(), q.to_string()])?;
        }
        w.flush().map_err(io_err(&path))?;
    } else {
        let ts = parse_range(&cfg.probe.t)?
            .into_iter()
            .map(|t| u32::try_from(t).map_err(|_| CliError::Config(format!("step {t} too large"))))
            .collect::<Result<Vec<_>, _>>()?;
        let grid = ProbeGrid { x: parse_range(&cfg.probe.x)?, y: parse_range(&cfg.probe.y)?, z: parse_range(&cfg.probe.z)?, t: ts.clone() };
        let rows = probe_grid(&policy, &grid)?;
        let path = out.join("probe.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["x", "y", "z", "t", "stop_prob", "stop_log_odds"])?;
        for r in &rows {
            w.write_record([
                r.x.to_string(),
                r.y.to_string(),
                r.z.to_string(),
                r.t.to_string(),
                r.stop_prob.to_string(),
                r.stop_log_odds.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(io_err(&path))?;
        for t in ts {
            let slice: Vec<_> = rows.iter().copied().filter(|r| r.t == t).collect();
            slices.push(Slice { t, alert_rank_correlation: alert_rank_correlation(&slice) });
        }
    }
    write_json(&out.join("probe.json"), &Doc { config: cfg, policy: policy.name(), slices })
}

/// Model file (default `model.json`) and `ingest.json` with the config echo.
pub fn ingest(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let input = cfg.ingest.input.as_ref().ok_or_else(|| CliError::Usage("ingest needs --input".into()))?;
    let file = File::open(input).map_err(io_err(input))?;
    let model = ingest_model(std::io::BufReader::new(file), &cfg.ingest.options)?;
    ensure_dir(out)?;
    let path = out.join("model.json");
    save_model(&model, &path)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a RunConfig,
        model_file: &'a str,
        keys: usize,
    }
    write_json(&out.join("ingest.json"), &Doc { config: cfg, model_file: "model.json", keys: model.entries().count() })
}
