//! Seeded episode simulator.
//!
//! Step `t = 1, 2, ...` unfolds as follows. If no intrusion is running, one
//! starts with probability `p`. The attacker phase is the number of steps
//! since onset, counting the onset step as phase 1. The observation for step
//! `t` is drawn from the distribution of the current (state, phase), the
//! counters and the belief are updated, the policy acts and the step reward
//! is paid. The episode ends when the defender stops, when an intrusion has
//! run through all attacker phases, or at the step cap. A terminal record
//! follows the last played step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::model::{
    self, Action, BeliefState, IntrusionState, ModelError, Observation, ObservationModel, RewardParams, TransitionModel,
};
use crate::policies::{HistorySummary, Policy, PolicyError, PolicyInput};
use crate::rng::{stream, Domain, StreamRng};
use rand::Rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid environment: {0}")]
    InvalidConfig(String),
    #[error("metrics need at least one episode")]
    EmptyTraceSet,
    #[error("the episode has already ended")]
    EpisodeOver,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub transition: TransitionModel,
    pub observations: ObservationModel,
    pub rewards: RewardParams,
    /// Number of attacker steps after which an intrusion is complete.
    pub attacker_sequence_length: u32,
    pub max_steps: u32,
}

impl EnvConfig {
    pub const DEFAULT_SEQUENCE_LENGTH: u32 = 22;
    pub const DEFAULT_MAX_STEPS: u32 = 200;

    /// Default rewards, onset probability and horizons.
    pub fn with_observations(observations: ObservationModel) -> Self {
        Self {
            transition: TransitionModel::default(),
            observations,
            rewards: RewardParams::default(),
            attacker_sequence_length: Self::DEFAULT_SEQUENCE_LENGTH,
            max_steps: Self::DEFAULT_MAX_STEPS,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.attacker_sequence_length == 0 {
            return Err(SimError::InvalidConfig("attacker_sequence_length must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(SimError::InvalidConfig("max_steps must be at least 1".into()));
        }
        self.observations.resolve(IntrusionState::Intrusion, 1).map_err(|_| {
            SimError::InvalidConfig("the observation model has no distribution for the first attacker phase".into())
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    DefenderStopped,
    IntrusionCompleted,
    MaxSteps,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DefenderStopped => "defender_stopped",
            Self::IntrusionCompleted => "intrusion_completed",
            Self::MaxSteps => "max_steps",
        }
    }
}

/// One step of an episode. The terminal record has state and observation
/// `Terminal`, no action and reward 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub state: IntrusionState,
    pub observation: Observation,
    pub action: Option<Action>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub intrusion_start: Option<u32>,
    pub steps: Vec<StepRecord>,
    pub end_reason: EndReason,
    pub total_reward: f64,
}

impl EpisodeTrace {
    /// Played steps, excluding the terminal record.
    pub fn length(&self) -> u32 {
        self.steps.len() as u32 - 1
    }

    /// Step at which the terminal state is reached.
    pub fn terminal_time(&self) -> u32 {
        self.steps.last().map_or(0, |s| s.t)
    }

    pub fn stop_time(&self) -> Option<u32> {
        (self.end_reason == EndReason::DefenderStopped).then(|| self.length())
    }

    pub fn outcome(&self) -> Outcome {
        match (self.stop_time(), self.intrusion_start) {
            (Some(s), Some(i)) if s >= i => Outcome::Detected { delay: s - i },
            (Some(_), _) => Outcome::EarlyStop,
            (None, _) => Outcome::NotStopped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Detected { delay: u32 },
    EarlyStop,
    NotStopped,
}

/// One live episode driven step by step, for callers that choose actions
/// themselves (the learner's rollouts).
pub struct Episode<'a> {
    env: &'a EnvConfig,
    t: u32,
    onset: Option<u32>,
    summary: HistorySummary,
    belief: BeliefState,
    observation: Observation,
    records: Vec<StepRecord>,
    total: f64,
    end: Option<EndReason>,
}

impl<'a> Episode<'a> {
    /// Resolves step 1 up to the point where the defender acts.
    pub fn start(env: &'a EnvConfig, rng: &mut StreamRng) -> Result<Self, SimError> {
        let mut ep = Self {
            env,
            t: 0,
            onset: None,
            summary: HistorySummary::default(),
            belief: BeliefState::NO_INTRUSION,
            observation: Observation::Terminal,
            records: Vec::new(),
            total: 0.0,
            end: None,
        };
        ep.advance(rng)?;
        Ok(ep)
    }

    fn state(&self) -> IntrusionState {
        if self.onset.is_some() {
            IntrusionState::Intrusion
        } else {
            IntrusionState::NoIntrusion
        }
    }

    fn phase(&self) -> u32 {
        self.onset.map_or(0, |i| self.t - i + 1)
    }

    fn advance(&mut self, rng: &mut StreamRng) -> Result<(), SimError> {
        self.t += 1;
        if self.onset.is_none() && rng.random::<f64>() < self.env.transition.p {
            self.onset = Some(self.t);
        }
        let o = self.env.observations.sample(self.state(), self.phase(), rng)?;
        if let Observation::Counts(c) = o {
            self.summary.x += u64::from(c.dx);
            self.summary.y += u64::from(c.dy);
            self.summary.z += u64::from(c.dz);
        }
        self.summary.t = self.t;
        self.belief = model::belief_update(self.belief, Action::Continue, &o, &self.env.transition, &self.env.observations)?;
        self.observation = o;
        Ok(())
    }

    /// Everything a policy may see at the current step.
    pub fn input(&self) -> PolicyInput {
        PolicyInput {
            summary: Some(self.summary),
            belief: Some(self.belief),
            intrusion_active: Some(self.onset.is_some()),
        }
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn is_over(&self) -> bool {
        self.end.is_some()
    }

    /// Plays `a` at the current step; returns the step reward.
    pub fn step(&mut self, a: Action, rng: &mut StreamRng) -> Result<f64, SimError> {
        if self.end.is_some() {
            return Err(SimError::EpisodeOver);
        }
        let state = self.state();
        let r = model::reward(state, a, &self.env.rewards);
        self.records.push(StepRecord { t: self.t, state, observation: self.observation, action: Some(a), reward: r });
        self.total += r;
        self.end = if a == Action::Stop {
            Some(EndReason::DefenderStopped)
        } else if self.phase() >= self.env.attacker_sequence_length {
            Some(EndReason::IntrusionCompleted)
        } else if self.t >= self.env.max_steps {
            Some(EndReason::MaxSteps)
        } else {
            None
        };
        match self.end {
            Some(_) => self.records.push(StepRecord {
                t: self.t + 1,
                state: IntrusionState::Terminal,
                observation: Observation::Terminal,
                action: None,
                reward: 0.0,
            }),
            None => self.advance(rng)?,
        }
        Ok(r)
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.end
    }

    /// Finished trace; `None` while the episode is still running.
    pub fn into_trace(self) -> Option<EpisodeTrace> {
        Some(EpisodeTrace {
            intrusion_start: self.onset,
            steps: self.records,
            end_reason: self.end?,
            total_reward: self.total,
        })
    }
}

pub fn run_episode<P: Policy + ?Sized>(policy: &P, env: &EnvConfig, rng: &mut StreamRng) -> Result<EpisodeTrace, SimError> {
    let mut ep = Episode::start(env, rng)?;
    while !ep.is_over() {
        let d = policy.act(&ep.input(), rng)?;
        ep.step(d.action, rng)?;
    }
    Ok(ep.into_trace().expect("episode finished"))
}

/// Summary statistics over a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub mean_episodic_reward: f64,
    pub mean_episode_length: f64,
    /// Stopped at or after onset.
    pub detection_probability: f64,
    /// Stopped strictly before onset (or with no onset at all).
    pub early_stopping_probability: f64,
    /// Never stopped: the intrusion completed or the step cap was hit.
    pub not_stopped_probability: f64,
    /// Mean steps from onset to stop over detected episodes; `None` when no
    /// episode was detected.
    pub mean_intrusion_to_stop_delay: Option<f64>,
    /// Fraction of episodes cut off by the step cap.
    pub max_steps_fraction: f64,
}

pub fn compute_metrics(traces: &[EpisodeTrace]) -> Result<Metrics, SimError> {
    if traces.is_empty() {
        return Err(SimError::EmptyTraceSet);
    }
    let n = traces.len() as f64;
    let (mut detected, mut early, mut capped, mut delay) = (0usize, 0usize, 0usize, 0u64);
    for tr in traces {
        match tr.outcome() {
            Outcome::Detected { delay: d } => {
                detected += 1;
                delay += u64::from(d);
            }
            Outcome::EarlyStop => early += 1,
            Outcome::NotStopped => {}
        }
        if tr.end_reason == EndReason::MaxSteps {
            capped += 1;
        }
    }
    let not_stopped = traces.len() - detected - early;
    Ok(Metrics {
        episodes: traces.len(),
        mean_episodic_reward: traces.iter().map(|t| t.total_reward).sum::<f64>() / n,
        mean_episode_length: traces.iter().map(|t| f64::from(t.length())).sum::<f64>() / n,
        detection_probability: detected as f64 / n,
        early_stopping_probability: early as f64 / n,
        not_stopped_probability: not_stopped as f64 / n,
        mean_intrusion_to_stop_delay: (detected > 0).then(|| delay as f64 / detected as f64),
        max_steps_fraction: capped as f64 / n,
    })
}

/// Episode `i` of a batch always draws from stream `(seed, Episode, i)`.
pub fn episode_rng(seed: u64, index: u64) -> StreamRng {
    stream(seed, Domain::Episode, index)
}

/// `n` episodes run in parallel; results do not depend on scheduling.
pub fn run_batch<P: Policy + ?Sized>(policy: &P, env: &EnvConfig, n: usize, seed: u64) -> Result<(Vec<EpisodeTrace>, Metrics), SimError> {
    env.validate()?;
    let traces = (0..n as u64)
        .into_par_iter()
        .map(|i| run_episode(policy, env, &mut episode_rng(seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let m = compute_metrics(&traces)?;
    Ok((traces, m))
}

/// Same as [`run_batch`] on the calling thread.
pub fn run_batch_serial<P: Policy + ?Sized>(policy: &P, env: &EnvConfig, n: usize, seed: u64) -> Result<(Vec<EpisodeTrace>, Metrics), SimError> {
    env.validate()?;
    let traces = (0..n as u64)
        .map(|i| run_episode(policy, env, &mut episode_rng(seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let m = compute_metrics(&traces)?;
    Ok((traces, m))
}

/// Per-episode row of the batch exports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub intrusion_start: Option<u32>,
    pub stop_time: Option<u32>,
    pub length: u32,
    pub end_reason: EndReason,
    pub total_reward: f64,
}

pub fn summarize(traces: &[EpisodeTrace]) -> Vec<EpisodeSummary> {
    traces
        .iter()
        .enumerate()
        .map(|(episode, t)| EpisodeSummary {
            episode,
            intrusion_start: t.intrusion_start,
            stop_time: t.stop_time(),
            length: t.length(),
            end_reason: t.end_reason,
            total_reward: t.total_reward,
        })
        .collect()
}

/// One JSON document per batch: the caller's config echo, per-episode
/// summaries and the metrics.
pub fn write_batch_json<W: Write, C: Serialize>(out: W, config: &C, traces: &[EpisodeTrace], metrics: &Metrics) -> Result<(), SimError> {
    #[derive(Serialize)]
    struct Doc<'a, C> {
        config: &'a C,
        metrics: &'a Metrics,
        episodes: Vec<EpisodeSummary>,
    }
    serde_json::to_writer_pretty(out, &Doc { config, metrics, episodes: summarize(traces) })?;
    Ok(())
}

/// Columns: `episode,intrusion_start,stop_time,length,end_reason,total_reward`;
/// missing times are empty cells.
pub fn write_episodes_csv<W: Write>(out: W, traces: &[EpisodeTrace]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "intrusion_start", "stop_time", "length", "end_reason", "total_reward"])?;
    let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in summarize(traces) {
        w.write_record([
            s.episode.to_string(),
            opt(s.intrusion_start),
            opt(s.stop_time),
            s.length.to_string(),
            s.end_reason.as_str().to_string(),
            s.total_reward.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::synthetic::{appendix_uniform, synthetic_model, PoissonLike, SyntheticPreset};
    use crate::policies::PolicyKind;
    use crate::model::Counts;

    fn appendix_env() -> EnvConfig {
        EnvConfig::with_observations(appendix_uniform())
    }

    fn trace(start: Option<u32>, stop: Option<u32>, len: u32, reward: f64) -> EpisodeTrace {
        let mut steps: Vec<StepRecord> = (1..=len)
            .map(|t| StepRecord {
                t,
                state: IntrusionState::NoIntrusion,
                observation: Observation::Counts(Counts::new(0, 0, 0)),
                action: Some(if Some(t) == stop { Action::Stop } else { Action::Continue }),
                reward: 0.0,
            })
            .collect();
        steps[0].reward = reward;
        steps.push(StepRecord { t: len + 1, state: IntrusionState::Terminal, observation: Observation::Terminal, action: None, reward: 0.0 });
        let end_reason = if stop.is_some() { EndReason::DefenderStopped } else { EndReason::IntrusionCompleted };
        EpisodeTrace { intrusion_start: start, steps, end_reason, total_reward: reward }
    }

    fn check_accounting(tr: &EpisodeTrace, env: &EnvConfig) {
        let sum: f64 = tr.steps.iter().map(|s| s.reward).sum();
        assert_eq!(sum, tr.total_reward);
        let terminal: Vec<_> = tr.steps.iter().filter(|s| s.state == IntrusionState::Terminal).collect();
        assert_eq!(terminal.len(), 1);
        let last = tr.steps.last().unwrap();
        assert_eq!(last.state, IntrusionState::Terminal);
        assert_eq!(last.observation, Observation::Terminal);
        assert!(tr.length() >= 1);
        for s in &tr.steps[..tr.steps.len() - 1] {
            assert_eq!(s.reward, model::reward(s.state, s.action.unwrap(), &env.rewards));
            assert_ne!(s.observation, Observation::Terminal);
        }
    }

    #[test]
    fn oracle_stops_at_onset() {
        let env = appendix_env();
        let (traces, m) = run_batch(&PolicyKind::Oracle, &env, 500, 4).unwrap();
        for tr in &traces {
            let i = tr.intrusion_start.unwrap();
            assert_eq!(tr.total_reward, 10.0 * f64::from(i - 1) + 100.0);
            assert_eq!(tr.stop_time(), Some(i));
            check_accounting(tr, &env);
        }
        assert_eq!(m.detection_probability, 1.0);
        assert_eq!(m.early_stopping_probability, 0.0);
        assert_eq!(m.mean_intrusion_to_stop_delay, Some(0.0));
    }

    #[test]
    fn never_stop_ends_at_completion() {
        let env = appendix_env();
        let (traces, m) = run_batch(&PolicyKind::AlwaysContinue, &env, 2000, 9).unwrap();
        for tr in &traces {
            check_accounting(tr, &env);
            let i = tr.intrusion_start.unwrap_or(u32::MAX);
            if i + env.attacker_sequence_length <= env.max_steps {
                assert_eq!(tr.end_reason, EndReason::IntrusionCompleted);
                assert_eq!(tr.terminal_time(), i + env.attacker_sequence_length);
            } else {
                assert_eq!(tr.end_reason, EndReason::MaxSteps);
            }
        }
        assert_eq!(m.not_stopped_probability, 1.0);
    }

    #[test]
    fn immediate_stop_pays_plus_or_minus_hundred() {
        let env = appendix_env();
        let (traces, m) = run_batch(&PolicyKind::FixedTime { k: 1 }, &env, 20_000, 2).unwrap();
        assert!(traces.iter().all(|t| t.total_reward == 100.0 || t.total_reward == -100.0));
        assert!((m.detection_probability - 0.2).abs() < 0.015);
        assert!((m.mean_episodic_reward + 60.0).abs() < 3.0);
    }

    #[test]
    fn onset_is_geometric() {
        let env = appendix_env();
        let n = 100_000;
        let (traces, _) = run_batch(&PolicyKind::AlwaysContinue, &env, n, 17).unwrap();
        let mut counts = [0usize; 21];
        for tr in &traces {
            if let Some(i) = tr.intrusion_start.filter(|&i| i <= 20) {
                counts[i as usize] += 1;
            }
        }
        let tv: f64 = (1..=20)
            .map(|k| {
                let expected = 0.8f64.powi(k - 1) * 0.2;
                (counts[k as usize] as f64 / n as f64 - expected).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.01, "total variation {tv}");
    }

    #[test]
    fn fixed_six_early_stop_matches_geometric_tail() {
        let env = EnvConfig::with_observations(synthetic_model(&SyntheticPreset::OverlappingPoissonlike(PoissonLike::default())).unwrap());
        let (_, m) = run_batch(&PolicyKind::FixedTime { k: 6 }, &env, 10_000, 1).unwrap();
        assert!((m.early_stopping_probability - 0.8f64.powi(6)).abs() <= 0.02, "{m:?}");
    }

    #[test]
    fn serial_and_parallel_agree() {
        let env = appendix_env();
        let p = PolicyKind::BeliefThreshold { alpha: 0.357 };
        let a = run_batch(&p, &env, 300, 5).unwrap();
        let b = run_batch_serial(&p, &env, 300, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(run_batch(&p, &env, 300, 5).unwrap().1, a.1);
    }

    #[test]
    fn single_episode_metrics() {
        let env = appendix_env();
        let (traces, m) = run_batch(&PolicyKind::FixedTime { k: 3 }, &env, 1, 8).unwrap();
        assert_eq!(m.episodes, 1);
        assert_eq!(m.mean_episodic_reward, traces[0].total_reward);
        assert_eq!(m.mean_episode_length, f64::from(traces[0].length()));
    }

    #[test]
    fn metrics_by_hand() {
        let traces = vec![
            trace(Some(1), Some(1), 1, 100.0),
            trace(Some(2), Some(1), 1, -100.0),
            trace(None, Some(4), 4, -70.0),
            trace(Some(3), Some(6), 6, 120.0),
            trace(Some(2), None, 23, -1500.0),
        ];
        let m = compute_metrics(&traces).unwrap();
        assert_eq!(m.episodes, 5);
        assert_eq!(m.detection_probability, 0.4);
        assert_eq!(m.early_stopping_probability, 0.4);
        assert_eq!(m.not_stopped_probability, 0.2);
        assert_eq!(m.mean_intrusion_to_stop_delay, Some(1.5));
        assert_eq!(m.mean_episode_length, 7.0);
        assert_eq!(m.mean_episodic_reward, -290.0);
        assert!(matches!(compute_metrics(&[]), Err(SimError::EmptyTraceSet)));
    }

    #[test]
    fn detection_counts_onsets_at_first_step() {
        let traces: Vec<_> = (0..10).map(|i| trace(if i < 3 { Some(1) } else { Some(2) }, Some(1), 1, 0.0)).collect();
        assert_eq!(compute_metrics(&traces).unwrap().detection_probability, 0.3);
    }

    #[test]
    fn threshold_policy_follows_solver_on_reachable_beliefs() {
        use crate::solver::{optimal_action, solve, BeliefMdp, SolverConfig};
        let env = appendix_env();
        let mdp = BeliefMdp::new(env.transition, env.rewards, &env.observations).unwrap();
        let (v, analysis) = solve(&mdp, &SolverConfig::default()).unwrap();
        let policy = PolicyKind::BeliefThreshold { alpha: analysis.alpha_star };
        for i in 0..1000 {
            let mut rng = episode_rng(21, i);
            let mut ep = Episode::start(&env, &mut rng).unwrap();
            while !ep.is_over() {
                let input = ep.input();
                let d = policy.act(&input, &mut rng).unwrap();
                assert_eq!(d.action, optimal_action(&v, &mdp, input.belief.unwrap()));
                ep.step(d.action, &mut rng).unwrap();
            }
        }
    }

    #[test]
    fn exports_are_stable() {
        let env = appendix_env();
        let (traces, m) = run_batch(&PolicyKind::FixedTime { k: 2 }, &env, 3, 1).unwrap();
        let mut a = Vec::new();
        write_episodes_csv(&mut a, &traces).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("episode,intrusion_start,stop_time,length,end_reason,total_reward\n"));
        assert_eq!(text.lines().count(), 4);
        let mut j = Vec::new();
        write_batch_json(&mut j, &serde_json::json!({"seed": 1}), &traces, &m).unwrap();
        let doc: serde_json::Value = serde_json::from_slice(&j).unwrap();
        assert_eq!(doc["episodes"].as_array().unwrap().len(), 3);
        assert_eq!(doc["config"]["seed"], 1);
    }

    #[test]
    fn stepping_after_the_end_fails() {
        let env = appendix_env();
        let mut rng = episode_rng(0, 0);
        let mut ep = Episode::start(&env, &mut rng).unwrap();
        ep.step(Action::Stop, &mut rng).unwrap();
        assert!(matches!(ep.step(Action::Continue, &mut rng), Err(SimError::EpisodeOver)));
    }
}
