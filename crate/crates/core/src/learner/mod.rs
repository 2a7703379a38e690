//! Actor-critic PPO with generalized advantage estimation.
//!
//! Each iteration collects `batch_steps` transitions with the current
//! stochastic policy, computes GAE targets, runs `updates_per_iteration`
//! epochs of shuffled minibatch Adam steps on the clipped surrogate, and
//! evaluates the greedy policy on a fixed set of episode seeds.

pub mod net;
pub mod ppo;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policies::{InputMode, NeuralPolicy, Normalization, PolicyError, PolicyKind};
use crate::rng::{derive_seed, stream, Domain};
use crate::sim::{run_batch, EnvConfig, Episode, Metrics, SimError};
use net::{index_action, Architecture, PolicyParams};
pub use ppo::{
    compare_gradient, finite_diff_check, gae_advantages, loss_and_grad, ppo_update, Adam, Batch, GradientCheck,
    LossBreakdown, LossConfig, StepEnd, Trajectory, Transition, UpdateStats,
};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("{count} parameters exceed the finite-difference limit of {limit}")]
    TooManyParameters { count: usize, limit: usize },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_steps: usize,
    /// Epochs over each batch.
    pub updates_per_iteration: usize,
    /// Minibatches per epoch.
    pub minibatches: usize,
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    /// Rewards are multiplied by this before they reach the critic.
    pub reward_scale: f64,
    pub normalize_advantages: bool,
    pub iterations: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub arch: Architecture,
    pub input: InputMode,
    /// Stopping time of the fixed-time baseline in the learning curves.
    pub baseline_fixed_k: u32,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_steps: 4000,
            updates_per_iteration: 10,
            minibatches: 4,
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            entropy_coef: 5e-4,
            value_coef: 0.5,
            gamma: 1.0,
            reward_scale: 0.01,
            normalize_advantages: true,
            iterations: 100,
            eval_episodes: 200,
            seed: 0,
            arch: Architecture::default(),
            input: InputMode::Summary,
            baseline_fixed_k: 6,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidConfig(m.into()));
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.batch_steps == 0 || self.minibatches == 0 {
            return bad("batch_steps and minibatches must be at least 1");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        if self.arch.input != net::INPUT_DIM {
            return bad("the network input width must be 4");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { clip_epsilon: self.clip_epsilon, entropy_coef: self.entropy_coef, value_coef: self.value_coef }
    }
}

/// One learning-curve row. Baselines and the oracle are evaluated once on the
/// same episode seeds as the learned policy and repeated in every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub env_steps: usize,
    pub policy: Metrics,
    pub fixed_time: Metrics,
    pub first_alert: Metrics,
    pub oracle: Metrics,
    pub loss: UpdateStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Greedy evaluation form of the trained policy.
    pub policy: NeuralPolicy,
    pub curve: Vec<CurveRecord>,
}

fn neural(params: PolicyParams, env: &EnvConfig, cfg: &TrainerConfig, deterministic: bool) -> NeuralPolicy {
    NeuralPolicy {
        params,
        input: cfg.input,
        norm: Normalization { bounds: env.observations.bounds(), max_steps: env.max_steps },
        deterministic,
    }
}

/// Collects exactly `steps` transitions; the last one is truncated unless an
/// episode happens to end there. Episodes cut by the step cap count as
/// terminal, since the environment itself ends them.
pub fn rollout(policy: &NeuralPolicy, env: &EnvConfig, steps: usize, rng: &mut crate::rng::StreamRng) -> Result<(Trajectory, usize), LearnerError> {
    let mut traj = Vec::with_capacity(steps);
    let mut episodes = 0;
    while traj.len() < steps {
        let mut ep = Episode::start(env, rng)?;
        episodes += 1;
        while !ep.is_over() && traj.len() < steps {
            let input = policy.features(&ep.input())?;
            let out = policy.params.forward(&input);
            let action = index_action(usize::from(rng.random::<f64>() >= out.stop_prob()));
            let reward = ep.step(action, rng)?;
            let end = if ep.is_over() {
                StepEnd::Terminal
            } else if traj.len() + 1 == steps {
                let next = policy.features(&ep.input())?;
                StepEnd::Truncated { bootstrap: policy.params.forward(&next).value }
            } else {
                StepEnd::Running
            };
            traj.push(Transition { input, action, log_prob: out.log_prob(action), reward, value: out.value, end });
        }
    }
    Ok((traj, episodes))
}

pub fn train(env: &EnvConfig, cfg: &TrainerConfig) -> Result<TrainOutcome, LearnerError> {
    train_with(env, cfg, |_, _| {})
}

/// Like [`train`], calling `on_iteration` after every evaluation with the new
/// curve row and the current greedy policy.
pub fn train_with(
    env: &EnvConfig,
    cfg: &TrainerConfig,
    mut on_iteration: impl FnMut(&CurveRecord, &NeuralPolicy),
) -> Result<TrainOutcome, LearnerError> {
    cfg.validate()?;
    env.validate()?;
    let mut params = PolicyParams::init(cfg.arch.clone(), &mut stream(cfg.seed, Domain::Init, 0));
    let mut curve = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(TrainOutcome { policy: neural(params, env, cfg, true), curve });
    }

    let eval_seed = derive_seed(cfg.seed, Domain::Evaluation, 0);
    let baseline = |p: PolicyKind| run_batch(&p, env, cfg.eval_episodes, eval_seed).map(|r| r.1);
    let fixed_time = baseline(PolicyKind::fixed_time(cfg.baseline_fixed_k)?)?;
    let first_alert = baseline(PolicyKind::FirstAlert)?;
    let oracle = baseline(PolicyKind::Oracle)?;

    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let minibatch = cfg.batch_steps.div_ceil(cfg.minibatches);
    let mut env_steps = 0;
    for it in 0..cfg.iterations {
        let sampler = neural(params.clone(), env, cfg, false);
        let mut rng = stream(cfg.seed, Domain::Rollout, it as u64);
        let (mut traj, _) = rollout(&sampler, env, cfg.batch_steps, &mut rng)?;
        env_steps += traj.len();
        for s in &mut traj {
            s.reward *= cfg.reward_scale;
        }
        let batch = Batch::from_trajectory(&traj, cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages);
        let mut shuffle = stream(cfg.seed, Domain::Shuffle, it as u64);
        let loss = ppo_update(&mut params, &batch, &cfg.loss(), cfg.updates_per_iteration, minibatch, &mut adam, &mut shuffle)?;

        let greedy = neural(params.clone(), env, cfg, true);
        let (_, policy) = run_batch(&PolicyKind::Neural(Box::new(greedy.clone())), env, cfg.eval_episodes, eval_seed)?;
        let record = CurveRecord { iteration: it + 1, env_steps, policy, fixed_time, first_alert, oracle, loss };
        on_iteration(&record, &greedy);
        curve.push(record);
    }
    Ok(TrainOutcome { policy: neural(params, env, cfg, true), curve })
}

const METRIC_COLUMNS: [&str; 6] = [
    "mean_episodic_reward",
    "mean_episode_length",
    "detection_probability",
    "early_stopping_probability",
    "mean_intrusion_to_stop_delay",
    "max_steps_fraction",
];

fn metric_values(m: &Metrics) -> [String; 6] {
    [
        m.mean_episodic_reward.to_string(),
        m.mean_episode_length.to_string(),
        m.detection_probability.to_string(),
        m.early_stopping_probability.to_string(),
        m.mean_intrusion_to_stop_delay.map(|d| d.to_string()).unwrap_or_default(),
        m.max_steps_fraction.to_string(),
    ]
}

/// Header of the learning-curve CSV: `iteration,env_steps`, then each metric
/// prefixed by `policy_`, `fixed_time_`, `first_alert_` and `oracle_`, then
/// `loss_total,clip_fraction`.
pub fn curve_header() -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "env_steps".to_string()];
    for who in ["policy", "fixed_time", "first_alert", "oracle"] {
        h.extend(METRIC_COLUMNS.iter().map(|c| format!("{who}_{c}")));
    }
    h.push("loss_total".into());
    h.push("clip_fraction".into());
    h
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[CurveRecord]) -> Result<(), LearnerError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(curve_header())?;
    for r in curve {
        let mut row = vec![r.iteration.to_string(), r.env_steps.to_string()];
        for m in [&r.policy, &r.fixed_time, &r.first_alert, &r.oracle] {
            row.extend(metric_values(m));
        }
        row.push(r.loss.last.total.to_string());
        row.push(r.loss.last.clip_fraction.to_string());
        w.write_record(row)?;
    }
    w.flush().map_err(|e| LearnerError::Csv(e.into()))?;
    Ok(())
}
