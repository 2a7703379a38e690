//! The intrusion-prevention POMDP.
//!
//! Hidden state: `NoIntrusion` (0), `Intrusion` (1) and an absorbing
//! `Terminal` state reached by stopping. The intrusion starts according to a
//! Bernoulli process with success probability `p` per step; once started it
//! persists. The belief is the scalar posterior `b1 = P[s_t = 1 | h_t]`.

mod observation;

pub use observation::{
    Bounds, CounterPmf, Counts, EmpiricalPmf, ObservationModel, Observation, PhaseKey, Pmf,
    MAX_ENUMERATED_OBSERVATIONS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("observation has zero probability under the model (normalizer {0:e})")]
    ZeroProbabilityObservation(f64),
    #[error("belief {0} outside [0, 1]")]
    BeliefOutOfRange(f64),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("the belief over non-terminal states is undefined after stopping")]
    StoppedBelief,
    #[error("unknown phase {phase} for {state:?}")]
    UnknownPhase { state: IntrusionState, phase: u32 },
    #[error("invalid observation model: {0}")]
    InvalidModel(String),
    #[error("observation space has {size} elements, limit is {limit}")]
    ObservationSpaceTooLarge { size: u128, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrusionState {
    NoIntrusion,
    Intrusion,
    Terminal,
}

impl IntrusionState {
    pub const ALL: [IntrusionState; 3] = [Self::NoIntrusion, Self::Intrusion, Self::Terminal];

    pub fn is_intrusion(self) -> bool {
        self == Self::Intrusion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stop,
    Continue,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Stop, Action::Continue];
}

/// Reward units for the four outcomes of a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Stopping while an intrusion is ongoing.
    pub r_stop_intrusion: f64,
    /// Stopping before the intrusion started.
    pub r_early_stop: f64,
    /// Service reward for every step the gateway stays open.
    pub r_service: f64,
    /// Extra loss for every step the gateway stays open during an intrusion.
    pub r_intruded: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            r_stop_intrusion: 100.0,
            r_early_stop: -100.0,
            r_service: 10.0,
            r_intruded: -100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    /// Per-step probability that an intrusion starts.
    pub p: f64,
}

impl TransitionModel {
    pub fn new(p: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::ProbabilityOutOfRange(p));
        }
        Ok(Self { p })
    }
}

impl Default for TransitionModel {
    fn default() -> Self {
        Self { p: 0.2 }
    }
}

/// Posterior probability that an intrusion is ongoing.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct BeliefState(f64);

impl BeliefState {
    pub const NO_INTRUSION: BeliefState = BeliefState(0.0);
    pub const INTRUSION: BeliefState = BeliefState(1.0);

    pub fn new(b1: f64) -> Result<Self, ModelError> {
        if (0.0..=1.0).contains(&b1) {
            Ok(Self(b1))
        } else {
            Err(ModelError::BeliefOutOfRange(b1))
        }
    }

    pub fn b1(self) -> f64 {
        self.0
    }

    pub fn b0(self) -> f64 {
        1.0 - self.0
    }

    fn of(self, s: IntrusionState) -> f64 {
        match s {
            IntrusionState::NoIntrusion => self.b0(),
            IntrusionState::Intrusion => self.b1(),
            IntrusionState::Terminal => 0.0,
        }
    }
}

const LIVE: [IntrusionState; 2] = [IntrusionState::NoIntrusion, IntrusionState::Intrusion];

/// `P[s2 | s, a]`.
pub fn transition_prob(s: IntrusionState, a: Action, s2: IntrusionState, m: &TransitionModel) -> f64 {
    use IntrusionState::*;
    match (s, a, s2) {
        (Terminal, _, Terminal) | (_, Action::Stop, Terminal) => 1.0,
        (Terminal, _, _) | (_, Action::Stop, _) => 0.0,
        (NoIntrusion, Action::Continue, NoIntrusion) => 1.0 - m.p,
        (NoIntrusion, Action::Continue, Intrusion) => m.p,
        (Intrusion, Action::Continue, Intrusion) => 1.0,
        (_, Action::Continue, _) => 0.0,
    }
}

/// `Z(o, s2, a)`. Counter observations are emitted from live states, with the
/// intrusion distribution aggregated over attacker phases; the terminal state
/// emits the terminal observation with certainty.
pub fn observation_prob(o: &Observation, s2: IntrusionState, _a: Action, z: &ObservationModel) -> f64 {
    match (o, s2) {
        (Observation::Terminal, IntrusionState::Terminal) => 1.0,
        (Observation::Terminal, _) | (Observation::Counts(_), IntrusionState::Terminal) => 0.0,
        (Observation::Counts(c), s) => z.state_prob(c, s.is_intrusion()),
    }
}

pub fn reward(s: IntrusionState, a: Action, r: &RewardParams) -> f64 {
    match (s, a) {
        (IntrusionState::Terminal, _) => 0.0,
        (IntrusionState::NoIntrusion, Action::Stop) => r.r_early_stop,
        (IntrusionState::Intrusion, Action::Stop) => r.r_stop_intrusion,
        (IntrusionState::NoIntrusion, Action::Continue) => r.r_service,
        (IntrusionState::Intrusion, Action::Continue) => r.r_service + r.r_intruded,
    }
}

/// Expected immediate reward under belief `b`.
pub fn belief_reward(b: BeliefState, a: Action, r: &RewardParams) -> f64 {
    LIVE.iter().map(|&s| b.of(s) * reward(s, a, r)).sum()
}

/// `P[o | b, a] = sum_s sum_s2 b(s) P[s2|s,a] Z(o,s2,a)`.
pub fn obs_marginal(
    b: BeliefState,
    a: Action,
    o: &Observation,
    m: &TransitionModel,
    z: &ObservationModel,
) -> f64 {
    let mut total = 0.0;
    for &s in &LIVE {
        let bs = b.of(s);
        if bs == 0.0 {
            continue;
        }
        for s2 in IntrusionState::ALL {
            let t = transition_prob(s, a, s2, m);
            if t != 0.0 {
                total += bs * t * observation_prob(o, s2, a, z);
            }
        }
    }
    total
}

/// One step of the Bayes filter after taking `a` and observing `o`.
pub fn belief_update(
    b: BeliefState,
    a: Action,
    o: &Observation,
    m: &TransitionModel,
    z: &ObservationModel,
) -> Result<BeliefState, ModelError> {
    if a == Action::Stop {
        return Err(ModelError::StoppedBelief);
    }
    let Observation::Counts(c) = o else {
        return Err(ModelError::ZeroProbabilityObservation(0.0));
    };
    let z0 = z.state_prob(c, false);
    let z1 = z.state_prob(c, true);
    update_with_likelihoods(b, a, m, z0, z1)
}

/// Filter step given the two state likelihoods of the observation. Shared by
/// the solver, which pre-tabulates likelihoods over the observation space.
pub fn update_with_likelihoods(
    b: BeliefState,
    a: Action,
    m: &TransitionModel,
    z0: f64,
    z1: f64,
) -> Result<BeliefState, ModelError> {
    let predicted = |s2| -> f64 { LIVE.iter().map(|&s| b.of(s) * transition_prob(s, a, s2, m)).sum() };
    let num = predicted(IntrusionState::Intrusion) * z1;
    let den = num + predicted(IntrusionState::NoIntrusion) * z0;
    if !(den > 0.0) || !den.is_finite() {
        return Err(ModelError::ZeroProbabilityObservation(den));
    }
    Ok(BeliefState((num / den).clamp(0.0, 1.0)))
}
