//! Exact solution of the belief MDP.
//!
//! The belief space is the interval `[0, 1]`, so every alpha vector is a line
//! `v0 * (1 - b1) + v1 * b1` and the value function is the upper envelope of
//! a set of lines. Pruning computes that envelope directly (sort by slope,
//! convex-hull sweep, clip to the unit interval); no linear programs are
//! needed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, belief_reward, transition_prob, Action, BeliefState, Counts, IntrusionState, ModelError, ObservationModel,
    RewardParams, TransitionModel, MAX_ENUMERATED_OBSERVATIONS,
};

/// Stop and continue values closer than this are a tie, resolved to `Stop`.
pub const TIE_TOLERANCE: f64 = 1e-9;
const DUPLICATE_TOLERANCE: f64 = 1e-9;
const BISECTION_RESOLUTION: f64 = 1e-6;
/// Envelope pieces that lift the value by at most this much are merged away
/// during backups. Without it the exact piece count can grow geometrically.
const PRUNE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, partial: Box<ValueFunction> },
    #[error("observation space has {size} elements, limit is {limit}")]
    ObservationSpaceTooLarge { size: u128, limit: usize },
    #[error("lemma-1 denominator {0:e} is too close to zero")]
    DegenerateDenominator(f64),
    #[error("stopping set is not an interval ending at 1 (first violation at b1 = {at})")]
    NonIntervalStoppingSet { at: f64 },
    #[error("grid size {0} is too small")]
    GridTooSmall(usize),
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for SolverError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ObservationSpaceTooLarge { size, limit } => Self::ObservationSpaceTooLarge { size, limit },
            other => Self::Model(other),
        }
    }
}

/// Linear function over the belief interval, given by its endpoint values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub v0: f64,
    pub v1: f64,
}

impl AlphaVector {
    pub fn new(v0: f64, v1: f64) -> Self {
        Self { v0, v1 }
    }

    pub fn at(&self, b1: f64) -> f64 {
        self.v0 * (1.0 - b1) + self.v1 * b1
    }

    fn slope(&self) -> f64 {
        self.v1 - self.v0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub gamma: f64,
    pub max_iterations: usize,
    /// Sup-norm change between successive iterates that counts as converged.
    pub tolerance: f64,
    pub belief_grid_size: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { gamma: 1.0, max_iterations: 500, tolerance: 1e-9, belief_grid_size: 1001 }
    }
}

/// Upper envelope of alpha vectors, sorted by increasing slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    vectors: Vec<AlphaVector>,
    pub gamma: f64,
    pub horizon_used: usize,
    pub converged: bool,
    pub residual: f64,
}

impl ValueFunction {
    /// Pruned envelope of `vectors`; panics on an empty set.
    pub fn from_vectors(vectors: Vec<AlphaVector>, gamma: f64) -> Self {
        assert!(!vectors.is_empty(), "value function needs at least one vector");
        Self { vectors: upper_envelope(vectors), gamma, horizon_used: 0, converged: false, residual: f64::INFINITY }
    }

    pub fn vectors(&self) -> &[AlphaVector] {
        &self.vectors
    }

    pub fn value_at(&self, b: BeliefState) -> f64 {
        self.eval(b.b1())
    }

    fn eval(&self, b1: f64) -> f64 {
        self.vectors.iter().map(|v| v.at(b1)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Interior beliefs where the maximizing vector changes.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.vectors
            .windows(2)
            .map(|w| intersection(&w[0], &w[1]))
            .filter(|x| *x > 0.0 && *x < 1.0)
            .collect()
    }

    /// Exact `sup_b |self(b) - other(b)|`: the difference of two piecewise
    /// linear functions peaks at an endpoint or a breakpoint of either.
    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        let mut points = vec![0.0, 1.0];
        points.extend(self.breakpoints());
        points.extend(other.breakpoints());
        points.into_iter().map(|b| (self.eval(b) - other.eval(b)).abs()).fold(0.0, f64::max)
    }
}

fn intersection(a: &AlphaVector, b: &AlphaVector) -> f64 {
    (a.v0 - b.v0) / (b.slope() - a.slope())
}

/// Removes every line that is nowhere strictly maximal on `[0, 1]`.
pub fn upper_envelope(mut lines: Vec<AlphaVector>) -> Vec<AlphaVector> {
    lines.retain(|l| l.v0.is_finite() && l.v1.is_finite());
    lines.sort_by(|p, q| p.slope().total_cmp(&q.slope()).then(q.v0.total_cmp(&p.v0)));
    let mut distinct: Vec<AlphaVector> = Vec::with_capacity(lines.len());
    for l in lines {
        if let Some(last) = distinct.last() {
            let same = (last.v0 - l.v0).abs() <= DUPLICATE_TOLERANCE && (last.v1 - l.v1).abs() <= DUPLICATE_TOLERANCE;
            if same || last.slope() == l.slope() {
                continue;
            }
        }
        distinct.push(l);
    }

    let mut hull: Vec<AlphaVector> = Vec::with_capacity(distinct.len());
    for l in distinct {
        while hull.len() >= 2 {
            let (a, b) = (&hull[hull.len() - 2], &hull[hull.len() - 1]);
            // b is hidden when l overtakes a no later than b does
            let hidden = (a.v0 - l.v0) * (b.slope() - a.slope()) <= (a.v0 - b.v0) * (l.slope() - a.slope());
            if hidden {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(l);
    }

    let n = hull.len();
    let cuts: Vec<f64> = hull.windows(2).map(|w| intersection(&w[0], &w[1])).collect();
    let kept: Vec<AlphaVector> = (0..n)
        .filter(|&i| {
            let lo = if i == 0 { 0.0 } else { cuts[i - 1].max(0.0) };
            let hi = if i + 1 == n { 1.0 } else { cuts[i].min(1.0) };
            hi > lo
        })
        .map(|i| hull[i])
        .collect();
    if kept.is_empty() {
        // all cuts coincide with an endpoint; the best line at b1 = 0 carries the envelope
        hull.into_iter().take(1).collect()
    } else {
        kept
    }
}

/// Drops envelope pieces whose removal lowers the envelope by at most `eps`.
/// Input must already be an exact envelope sorted by slope.
fn simplify_envelope(lines: Vec<AlphaVector>, eps: f64) -> Vec<AlphaVector> {
    let mut out: Vec<AlphaVector> = Vec::with_capacity(lines.len());
    for l in lines {
        out.push(l);
        while out.len() >= 3 {
            let n = out.len();
            let (a, m, c) = (out[n - 3], out[n - 2], out[n - 1]);
            let x = intersection(&a, &c).clamp(0.0, 1.0);
            if m.at(x) - a.at(x).max(c.at(x)) <= eps {
                out.remove(n - 2);
            } else {
                break;
            }
        }
    }
    if out.len() >= 2 && out[0].at(0.0) - out[1].at(0.0) <= eps {
        out.remove(0);
    }
    let n = out.len();
    if n >= 2 && out[n - 1].at(1.0) - out[n - 2].at(1.0) <= eps {
        out.pop();
    }
    out
}

/// Upper envelope of all pairwise sums of two envelopes. The sum of two
/// concave piecewise linear functions breaks only where either input does,
/// so a single merge over the breakpoints suffices.
fn envelope_sum(a: &[AlphaVector], b: &[AlphaVector]) -> Vec<AlphaVector> {
    let cuts = |v: &[AlphaVector]| -> Vec<f64> { v.windows(2).map(|w| intersection(&w[0], &w[1])).collect() };
    let (ca, cb) = (cuts(a), cuts(b));
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len() + b.len());
    loop {
        out.push(AlphaVector::new(a[i].v0 + b[j].v0, a[i].v1 + b[j].v1));
        match (ca.get(i), cb.get(j)) {
            (None, None) => break,
            (Some(_), None) => i += 1,
            (None, Some(_)) => j += 1,
            (Some(x), Some(y)) => {
                if x <= y {
                    i += 1;
                }
                if y <= x {
                    j += 1;
                }
            }
        }
    }
    upper_envelope(out)
}

/// The belief MDP with the observation space enumerated: state likelihoods
/// `z0[k]`, `z1[k]` of the `k`-th observation under continue.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMdp {
    pub transition: TransitionModel,
    pub rewards: RewardParams,
    pub observations: Vec<Counts>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
}

impl BeliefMdp {
    /// Phases are aggregated into a single intrusion distribution.
    pub fn new(transition: TransitionModel, rewards: RewardParams, z: &ObservationModel) -> Result<Self, SolverError> {
        let observations = z.enumerate_support(MAX_ENUMERATED_OBSERVATIONS)?;
        let z0 = observations.iter().map(|c| z.state_prob(c, false)).collect();
        let z1 = observations.iter().map(|c| z.state_prob(c, true)).collect();
        Ok(Self { transition, rewards, observations, z0, z1 })
    }

    /// Scalar observations `0..n` with the given likelihood vectors.
    pub fn from_likelihoods(transition: TransitionModel, rewards: RewardParams, z0: Vec<f64>, z1: Vec<f64>) -> Self {
        assert_eq!(z0.len(), z1.len());
        let observations = (0..z0.len() as u32).map(|o| Counts::new(o, 0, 0)).collect();
        Self { transition, rewards, observations, z0, z1 }
    }

    /// Marginal probability of observation `k` under continue, and the
    /// posterior when that probability is positive.
    fn successor(&self, b: BeliefState, k: usize) -> (f64, Option<BeliefState>) {
        let p1 = b.b1();
        let pred = p1 + (1.0 - p1) * self.transition.p;
        let marginal = pred * self.z1[k] + (1.0 - pred) * self.z0[k];
        let next = model::update_with_likelihoods(b, Action::Continue, &self.transition, self.z0[k], self.z1[k]).ok();
        (marginal, next)
    }

    /// Kernel entry used for alpha-vector backups.
    fn kernel(&self, s: IntrusionState, s2: IntrusionState) -> f64 {
        transition_prob(s, Action::Continue, s2, &self.transition)
    }
}

/// Sondik-style exact value iteration with incremental cross-sum pruning.
pub fn value_iteration(mdp: &BeliefMdp, cfg: &SolverConfig) -> Result<ValueFunction, SolverError> {
    let mut v = ValueFunction::from_vectors(vec![AlphaVector::new(0.0, 0.0)], cfg.gamma);
    for it in 1..=cfg.max_iterations {
        let mut next = backup(mdp, &v, cfg.gamma);
        let residual = next.sup_distance(&v);
        next.horizon_used = it;
        next.residual = residual;
        v = next;
        if residual <= cfg.tolerance {
            v.converged = true;
            return Ok(v);
        }
    }
    Err(SolverError::NotConverged { iterations: cfg.max_iterations, residual: v.residual, partial: Box::new(v) })
}

/// One exact Bellman backup.
pub fn backup(mdp: &BeliefMdp, v: &ValueFunction, gamma: f64) -> ValueFunction {
    use IntrusionState::{Intrusion as I1, NoIntrusion as I0};
    let r = &mdp.rewards;
    let stop = AlphaVector::new(
        model::reward(I0, Action::Stop, r),
        model::reward(I1, Action::Stop, r),
    );
    let mut cont = vec![AlphaVector::new(model::reward(I0, Action::Continue, r), model::reward(I1, Action::Continue, r))];
    for k in 0..mdp.observations.len() {
        let (z0, z1) = (mdp.z0[k], mdp.z1[k]);
        if z0 == 0.0 && z1 == 0.0 {
            continue;
        }
        let projected: Vec<AlphaVector> = v
            .vectors
            .iter()
            .map(|a| {
                let g = |s| gamma * (mdp.kernel(s, I0) * z0 * a.v0 + mdp.kernel(s, I1) * z1 * a.v1);
                AlphaVector::new(g(I0), g(I1))
            })
            .collect();
        let projected = upper_envelope(projected);
        let sum = envelope_sum(&cont, &projected);
        let scale = sum.iter().map(|a| a.v0.abs().max(a.v1.abs())).fold(1.0, f64::max);
        cont = simplify_envelope(upper_envelope(sum), PRUNE_TOLERANCE * scale);
    }
    cont.push(stop);
    ValueFunction::from_vectors(cont, gamma)
}

/// Expected value of stopping and of continuing at `b`.
pub fn q_values(v: &ValueFunction, mdp: &BeliefMdp, b: BeliefState) -> (f64, f64) {
    let q_stop = belief_reward(b, Action::Stop, &mdp.rewards);
    let mut future = 0.0;
    for k in 0..mdp.observations.len() {
        let (marginal, next) = mdp.successor(b, k);
        if marginal > 0.0 {
            if let Some(n) = next {
                future += marginal * v.value_at(n);
            }
        }
    }
    (q_stop, belief_reward(b, Action::Continue, &mdp.rewards) + v.gamma * future)
}

/// Greedy one-step lookahead action; ties go to `Stop`.
pub fn optimal_action(v: &ValueFunction, mdp: &BeliefMdp, b: BeliefState) -> Action {
    let (q_stop, q_cont) = q_values(v, mdp, b);
    if q_stop >= q_cont - TIE_TOLERANCE {
        Action::Stop
    } else {
        Action::Continue
    }
}

/// Closed-form stopping threshold at one belief: stopping is optimal iff
/// `b1 >= numerator / denominator` (for a positive denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Threshold {
    pub alpha: f64,
    pub numerator: f64,
    pub denominator: f64,
}

impl Lemma1Threshold {
    /// Threshold test with the same tie rule as [`optimal_action`].
    pub fn prescribes_stop(&self, b1: f64) -> bool {
        b1 * self.denominator - self.numerator >= -TIE_TOLERANCE
    }
}

/// With `K = sum_o V(b_o) (p z1 + (1-p) z0)` and `M = sum_o V(b_o) z1`:
///
/// ```text
/// alpha_b = (R_service - R_early + g K) / (R_stop - R_early - R_intruded + g (K - M))
/// ```
///
/// which is `(110 + K) / (300 + K - M)` for the default rewards and `g = 1`.
pub fn lemma1_threshold(v: &ValueFunction, mdp: &BeliefMdp, b: BeliefState) -> Result<Lemma1Threshold, SolverError> {
    let p = mdp.transition.p;
    let r = &mdp.rewards;
    let (mut k_sum, mut m_sum) = (0.0, 0.0);
    for k in 0..mdp.observations.len() {
        let (z0, z1) = (mdp.z0[k], mdp.z1[k]);
        let from_clean = p * z1 + (1.0 - p) * z0;
        if from_clean == 0.0 && z1 == 0.0 {
            continue;
        }
        let (marginal, next) = mdp.successor(b, k);
        let next = match next {
            Some(n) if marginal > 0.0 => n,
            // unreachable from b: its terms cancel in the comparison, use the limit posterior
            _ if z1 > 0.0 => BeliefState::INTRUSION,
            _ => BeliefState::NO_INTRUSION,
        };
        let value = v.value_at(next);
        k_sum += value * from_clean;
        m_sum += value * z1;
    }
    let g = v.gamma;
    let numerator = r.r_service - r.r_early_stop + g * k_sum;
    let denominator = r.r_stop_intrusion - r.r_early_stop - r.r_intruded + g * (k_sum - m_sum);
    if denominator.abs() < 1e-9 {
        return Err(SolverError::DegenerateDenominator(denominator));
    }
    Ok(Lemma1Threshold { alpha: numerator / denominator, numerator, denominator })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub b1: f64,
    /// `b1 - alpha_b1`; non-negative exactly where stopping is optimal.
    pub margin: f64,
    pub value: f64,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAnalysis {
    pub alpha_star: f64,
    /// Closed interval of beliefs where stopping is optimal.
    pub stopping_set: (f64, f64),
    pub curve: Vec<CurvePoint>,
}

/// Classifies a uniform belief grid and extracts the threshold `alpha*`,
/// refined by bisection between the last continue and first stop point.
pub fn stopping_set(v: &ValueFunction, mdp: &BeliefMdp, grid_size: usize) -> Result<ThresholdAnalysis, SolverError> {
    if grid_size < 100 {
        return Err(SolverError::GridTooSmall(grid_size));
    }
    let step = 1.0 / (grid_size - 1) as f64;
    let belief = |i: usize| BeliefState::new(if i + 1 == grid_size { 1.0 } else { i as f64 * step }).expect("grid inside [0,1]");
    let mut curve = Vec::with_capacity(grid_size);
    for i in 0..grid_size {
        let b = belief(i);
        let stop = optimal_action(v, mdp, b) == Action::Stop;
        let lemma = lemma1_threshold(v, mdp, b)?;
        curve.push(CurvePoint { b1: b.b1(), margin: b.b1() - lemma.alpha, value: v.value_at(b), stop });
    }
    let first = curve.iter().position(|c| c.stop).ok_or(SolverError::NonIntervalStoppingSet { at: 1.0 })?;
    if let Some(bad) = curve[first..].iter().find(|c| !c.stop) {
        return Err(SolverError::NonIntervalStoppingSet { at: bad.b1 });
    }
    let alpha_star = if first == 0 {
        0.0
    } else {
        let (mut lo, mut hi) = (curve[first - 1].b1, curve[first].b1);
        while hi - lo > BISECTION_RESOLUTION {
            let mid = 0.5 * (lo + hi);
            if optimal_action(v, mdp, BeliefState::new(mid).expect("inside [0,1]")) == Action::Stop {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    Ok(ThresholdAnalysis { alpha_star, stopping_set: (alpha_star, 1.0), curve })
}

/// Solve and analyse in one call.
pub fn solve(mdp: &BeliefMdp, cfg: &SolverConfig) -> Result<(ValueFunction, ThresholdAnalysis), SolverError> {
    let v = value_iteration(mdp, cfg)?;
    let t = stopping_set(&v, mdp, cfg.belief_grid_size)?;
    Ok((v, t))
}
