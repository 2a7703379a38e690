//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines always reach the output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use optstop_core::dists::{appendix_uniform, synthetic_model, PoissonLike, SyntheticPreset};
use optstop_core::learner::net::{Architecture, PolicyParams};
use optstop_core::learner::ppo::{finite_diff_check, Batch};
use optstop_core::learner::{train, TrainerConfig};
use optstop_core::model::{belief_update, Action, Bounds, CounterPmf, Counts, Observation, ObservationModel, Pmf};
use optstop_core::policies::{alert_rank_correlation, probe_grid, InputMode, PolicyKind, ProbeGrid};
use optstop_core::rng::{stream, Domain};
use optstop_core::sim::{run_batch, EnvConfig};
use optstop_core::solver::{lemma1_threshold, optimal_action, solve};
use optstop_core::{BeliefMdp, BeliefState, RewardParams, SolverConfig, TransitionModel};
use rand::Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_optstop");
const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_EPISODES: usize = 20_000;
const EVAL_SEED: u64 = 7_777;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn optstop(out: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(BIN).arg("--out").arg(out).args(args).output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("optstop {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn appendix_mdp() -> BeliefMdp {
    BeliefMdp::new(TransitionModel::default(), RewardParams::default(), &appendix_uniform()).unwrap()
}

fn random_pmf(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn random_mdp(rng: &mut impl Rng) -> BeliefMdp {
    let n = rng.random_range(2..=6);
    let transition = TransitionModel::new(rng.random_range(0.05..0.5)).unwrap();
    BeliefMdp::from_likelihoods(transition, RewardParams::default(), random_pmf(rng, n), random_pmf(rng, n))
}

fn grid(n: usize) -> impl Iterator<Item = BeliefState> {
    (0..n).map(move |i| BeliefState::new(if i + 1 == n { 1.0 } else { i as f64 / (n - 1) as f64 }).unwrap())
}

/// Criterion 1, through the command-line interface.
fn appendix_reproduction(tmp: &Path) -> Result<Verdict, String> {
    let out = tmp.join("c1");
    let started = Instant::now();
    optstop(&out, &["solve", "--grid", "1001", "--p", "0.2", "--model", "appendix_uniform"])?;
    let secs = started.elapsed().as_secs_f64();
    let doc = read_json(&out.join("solve.json"))?;
    let alpha = doc["alpha_star"].as_f64().ok_or("no alpha_star")?;
    let v1 = doc["value_at_1"].as_f64().ok_or("no value_at_1")?;
    let set = (doc["stopping_set"][0].as_f64().unwrap_or(f64::NAN), doc["stopping_set"][1].as_f64().unwrap_or(f64::NAN));
    let mut reader = csv::Reader::from_path(out.join("threshold_curve.csv")).map_err(|e| e.to_string())?;
    let mut points = 0;
    let mut mismatches = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let b1: f64 = rec[0].parse().map_err(|_| "bad b1")?;
        let stop = &rec[3] == "1";
        points += 1;
        if stop != (b1 >= alpha) {
            mismatches += 1;
        }
    }
    let pass = (alpha - 0.357).abs() <= 0.005
        && set == (alpha, 1.0)
        && v1 == 100.0
        && points == 1001
        && mismatches == 0
        && secs < 5.0;
    Ok(verdict(
        pass,
        format!("alpha*={alpha:.5} set=[{:.5}, {}] V*(1)={v1} grid={points} mismatches={mismatches} in {secs:.2}s", set.0, set.1),
    ))
}

fn lemma1_equivalence() -> Result<Verdict, String> {
    let mut rng = stream(11, Domain::Sampling, 0);
    let mut models = vec![appendix_mdp()];
    models.extend((0..3).map(|_| random_mdp(&mut rng)));
    let mut checked = 0;
    let mut mismatches = 0;
    for mdp in &models {
        let (v, _) = solve(mdp, &SolverConfig::default()).map_err(|e| e.to_string())?;
        for b in grid(1001) {
            let lemma = lemma1_threshold(&v, mdp, b).map_err(|e| e.to_string())?.prescribes_stop(b.b1());
            let bellman = optimal_action(&v, mdp, b) == Action::Stop;
            checked += 1;
            mismatches += usize::from(lemma != bellman);
        }
    }
    Ok(verdict(mismatches == 0, format!("{} models, {checked} beliefs, {mismatches} mismatches", models.len())))
}

fn value_structure() -> Result<Verdict, String> {
    let mdp = appendix_mdp();
    let (v, analysis) = solve(&mdp, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let pts: Vec<f64> = grid(1001).map(|b| b.b1()).collect();
    let mut worst = f64::NEG_INFINITY;
    for w in pts.windows(2) {
        let mid = BeliefState::new(0.5 * (w[0] + w[1])).unwrap();
        let chord = 0.5 * (v.value_at(BeliefState::new(w[0]).unwrap()) + v.value_at(BeliefState::new(w[1]).unwrap()));
        worst = worst.max(v.value_at(mid) - chord);
    }
    let drops = analysis.curve.windows(2).filter(|w| w[1].margin < w[0].margin - 1e-12).count();
    Ok(verdict(worst <= 1e-9 && drops == 0, format!("max midpoint excess {worst:.2e}, margin decreases {drops}")))
}

/// Posterior of an ongoing intrusion by summing over every onset step `k`:
/// `k = 0` means already ongoing under the prior, `k = n + 1` never started.
fn enumerate_posterior(prior: f64, p: f64, z0: &[f64], z1: &[f64], obs: &[usize]) -> f64 {
    let n = obs.len();
    let (mut on, mut total) = (0.0, 0.0);
    for k in 0..=n + 1 {
        let mut w = match k {
            0 => prior,
            k if k <= n => (1.0 - prior) * (1.0 - p).powi(k as i32 - 1) * p,
            _ => (1.0 - prior) * (1.0 - p).powi(n as i32),
        };
        for (t, &o) in obs.iter().enumerate() {
            w *= if t + 1 >= k { z1[o] } else { z0[o] };
        }
        total += w;
        if k <= n {
            on += w;
        }
    }
    on / total
}

fn filter_oracle() -> Result<Verdict, String> {
    let mut rng = stream(12, Domain::Sampling, 0);
    let mut worst: f64 = 0.0;
    let mut sequences = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let (z0, z1) = (random_pmf(&mut rng, n), random_pmf(&mut rng, n));
        let p = rng.random_range(0.01..0.6);
        let product = |probs: &[f64]| CounterPmf::Product {
            x: Pmf::from_probs((0..n as u32).collect(), probs.to_vec()).unwrap(),
            y: Pmf::point(0),
            z: Pmf::point(0),
        };
        let model = ObservationModel::two_state(Bounds::new(n as u32 - 1, 0, 0), product(&z0), product(&z1)).unwrap();
        let transition = TransitionModel::new(p).unwrap();
        for len in 1..=10 {
            let prior = rng.random_range(0.0..1.0);
            let obs: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
            let mut b = BeliefState::new(prior).unwrap();
            for &o in &obs {
                let o = Observation::Counts(Counts::new(o as u32, 0, 0));
                b = belief_update(b, Action::Continue, &o, &transition, &model).map_err(|e| e.to_string())?;
            }
            worst = worst.max((b.b1() - enumerate_posterior(prior, p, &z0, &z1, &obs)).abs());
            sequences += 1;
        }
    }
    Ok(verdict(worst <= 1e-10, format!("100 models, {sequences} sequences, max error {worst:.2e}")))
}

fn gradient_check() -> Result<Verdict, String> {
    let arch = Architecture { input: 4, hidden: vec![16, 16, 16] };
    let loss = TrainerConfig::default().loss();
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = stream(seed, Domain::Init, 99);
        let params = PolicyParams::init(arch.clone(), &mut rng);
        let mut batch = Batch { inputs: vec![], actions: vec![], old_log_probs: vec![], advantages: vec![], returns: vec![] };
        for _ in 0..64 {
            let input: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let action = if rng.random_bool(0.5) { Action::Stop } else { Action::Continue };
            let old = params.forward(&input).log_prob(action) + rng.random_range(-0.3..0.3);
            batch.inputs.push(input);
            batch.actions.push(action);
            batch.old_log_probs.push(old);
            batch.advantages.push(rng.random_range(-2.0..2.0));
            batch.returns.push(rng.random_range(-2.0..2.0));
        }
        let check = finite_diff_check(&params, &batch, &loss).map_err(|e| e.to_string())?;
        worst = worst.max(check.max_relative_error);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 1e-4 && secs < 30.0,
        format!("{} parameters, 5 seeds, max relative error {worst:.2e} in {secs:.1}s", arch.param_count()),
    ))
}

fn evaluate(policy: &PolicyKind, env: &EnvConfig) -> Result<f64, String> {
    let (_, m) = run_batch(policy, env, EVAL_EPISODES, EVAL_SEED).map_err(|e| e.to_string())?;
    Ok(m.mean_episodic_reward)
}

fn train_and_evaluate(env: &EnvConfig, input: InputMode, iterations: usize, seed: u64) -> Result<f64, String> {
    let cfg = TrainerConfig { input, iterations, seed, ..TrainerConfig::default() };
    let outcome = train(env, &cfg).map_err(|e| e.to_string())?;
    evaluate(&PolicyKind::Neural(Box::new(outcome.policy)), env)
}

fn rl_vs_exact() -> Result<Verdict, String> {
    let started = Instant::now();
    let env = EnvConfig::with_observations(appendix_uniform());
    let (v, _) = solve(&appendix_mdp(), &SolverConfig::default()).map_err(|e| e.to_string())?;
    // The first decision already sees one observation: V*(0) = R_sla + E[V*(b1)].
    let target = v.value_at(BeliefState::NO_INTRUSION) - env.rewards.r_service;
    let floor = target - 0.1 * target.abs();
    let mut belief = Vec::new();
    let mut summary = Vec::new();
    for seed in SEEDS {
        belief.push(train_and_evaluate(&env, InputMode::Belief, 30, seed)?);
        summary.push(train_and_evaluate(&env, InputMode::Summary, 50, seed)?);
    }
    let fixed = evaluate(&PolicyKind::FixedTime { k: TrainerConfig::default().baseline_fixed_k }, &env)?;
    let first = evaluate(&PolicyKind::FirstAlert, &env)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (jb, js) = (mean(&belief), mean(&summary));
    let pass = jb >= floor && js > fixed && js > first;
    Ok(verdict(
        pass,
        format!(
            "belief {jb:.2} (seeds {belief:.2?}) vs floor {floor:.2} from J*={target:.2}; summary {js:.2} vs fixed {fixed:.2}, first-alert {first:.2}; {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    ))
}

/// Scalar alert model: an alert fires with probability `q` per quiet step and
/// 0.9 per intrusion step.
fn alert_model(q: f64) -> ObservationModel {
    let pmf = |a: f64| CounterPmf::Product { x: Pmf::from_probs(vec![0, 1], vec![1.0 - a, a]).unwrap(), y: Pmf::point(0), z: Pmf::point(0) };
    ObservationModel::two_state(Bounds::new(1, 0, 0), pmf(q), pmf(0.9)).unwrap()
}

fn baseline_analytics() -> Result<Verdict, String> {
    let env = EnvConfig::with_observations(appendix_uniform());
    let tail = (1.0 - env.transition.p).powi(6);
    let (_, fixed) = run_batch(&PolicyKind::FixedTime { k: 6 }, &env, 10_000, 21).map_err(|e| e.to_string())?;
    let tail_ok = (fixed.early_stopping_probability - tail).abs() <= 0.02;
    let mut orderings = Vec::new();
    let mut models: Vec<(String, EnvConfig)> = vec![("appendix".into(), env.clone())];
    for q in [0.27, 0.4, 0.7] {
        models.push((format!("q={q}"), EnvConfig::with_observations(alert_model(q))));
    }
    let mut ordered = true;
    for (name, env) in &models {
        let (_, f) = run_batch(&PolicyKind::FixedTime { k: 6 }, env, 10_000, 22).map_err(|e| e.to_string())?;
        let (_, a) = run_batch(&PolicyKind::FirstAlert, env, 10_000, 22).map_err(|e| e.to_string())?;
        ordered &= a.early_stopping_probability > f.early_stopping_probability;
        orderings.push(format!("{name}: {:.3}>{:.3}", a.early_stopping_probability, f.early_stopping_probability));
    }
    Ok(verdict(
        tail_ok && ordered,
        format!("fixed-6 early stop {:.4} vs tail {tail:.4}; first-alert vs fixed {}", fixed.early_stopping_probability, orderings.join(", ")),
    ))
}

fn threshold_shape() -> Result<Verdict, String> {
    let env = EnvConfig::with_observations(synthetic_model(&SyntheticPreset::OverlappingPoissonlike(PoissonLike::default())).unwrap());
    let cfg = TrainerConfig { iterations: 60, seed: 0, ..TrainerConfig::default() };
    let outcome = train(&env, &cfg).map_err(|e| e.to_string())?;
    let policy = PolicyKind::Neural(Box::new(outcome.policy));
    let mut parts = Vec::new();
    let mut pass = true;
    for t in [5u32, 10, 20] {
        let grid = ProbeGrid { x: (0..=200).step_by(10).collect(), y: (0..=400).step_by(20).collect(), z: vec![3 * t as u64], t: vec![t] };
        let rows = probe_grid(&policy, &grid).map_err(|e| e.to_string())?;
        let rho = alert_rank_correlation(&rows);
        pass &= rho.is_some_and(|r| r >= 0.9);
        parts.push(format!("t={t}: {}", rho.map_or("undefined".into(), |r| format!("{r:.3}"))));
    }
    Ok(verdict(pass, format!("Spearman(x+y, stop) {}", parts.join(", "))))
}

fn data_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "meta.json") {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism(tmp: &Path) -> Result<Verdict, String> {
    let base = tmp.join("c9");
    let measurements = base.join("measurements.csv");
    fs::create_dir_all(&base).map_err(|e| e.to_string())?;
    let mut csv = String::from("t,intrusion_active,attacker_step,dx,dy,dz\n");
    for t in 0..40u32 {
        let on = t >= 25;
        csv += &format!("{t},{},{},{},{},{}\n", u8::from(on), if on { t - 24 } else { 0 }, (t * 7) % 5 + 3 * u32::from(on), t % 3, (t / 4) % 2);
    }
    fs::write(&measurements, csv).map_err(|e| e.to_string())?;
    let policy_file = base.join("policy.json");
    let m = measurements.to_str().unwrap();
    let pf = policy_file.to_str().unwrap();
    let train_args = ["train", "--iterations", "2", "--batch-steps", "400", "--eval-episodes", "30", "--seeds", "3,4", "--checkpoint-every", "1"];
    optstop(&base.join("seed_run"), &train_args)?;
    fs::copy(base.join("seed_run/train_seed3/policy.json"), &policy_file).map_err(|e| e.to_string())?;
    let results = base.join("seed_run");
    let r = results.to_str().unwrap();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("solve", vec!["solve"]),
        ("train", train_args.to_vec()),
        ("simulate", vec!["simulate", "--policy", "threshold:0.36", "--episodes", "300", "--seed", "5"]),
        ("evaluate", vec!["evaluate", "--policy", "first_alert", "--episodes", "300"]),
        ("probe", vec!["probe", "--policy-file", pf, "--t", "5,10"]),
        ("ingest", vec!["ingest", "--input", m, "--bounds", "10,3,2", "--smoothing"]),
        ("report", vec!["report", "--results", r]),
    ];
    let mut differing = Vec::new();
    for (name, args) in &runs {
        let (a, b) = (base.join(format!("{name}_a")), base.join(format!("{name}_b")));
        let out_a = optstop(&a, args)?;
        let out_b = optstop(&b, args)?;
        let (fa, fb) = (data_files(&a), data_files(&b));
        if fa.is_empty() || fa != fb || out_a != out_b {
            differing.push(*name);
        }
    }
    Ok(verdict(
        differing.is_empty(),
        if differing.is_empty() { format!("{} subcommands byte-identical on rerun", runs.len()) } else { format!("differs: {differing:?}") },
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<Verdict, String>>)> = vec![
        ("appendix reproduction", Box::new(|| appendix_reproduction(tmp.path()))),
        ("threshold formula matches Bellman", Box::new(lemma1_equivalence)),
        ("value function convex, margin monotone", Box::new(value_structure)),
        ("filter matches path enumeration", Box::new(filter_oracle)),
        ("gradient finite differences", Box::new(gradient_check)),
        ("learned reward vs exact optimum", Box::new(rl_vs_exact)),
        ("baseline analytics", Box::new(baseline_analytics)),
        ("threshold shape of learned policy", Box::new(threshold_shape)),
        ("determinism of reruns", Box::new(|| determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        failed += usize::from(!v.pass);
        println!("criterion {} {}: {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
