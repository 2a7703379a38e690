//! Defender policies.
//!
//! Every policy sees a [`PolicyInput`] and returns a [`Decision`]: the action
//! and the probability with which it would stop. Deterministic policies report
//! stop probabilities of exactly 0 or 1.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::net::{PolicyParams, INPUT_DIM};
use crate::model::{Action, BeliefState, Bounds};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy {policy} needs the {input} input")]
    MissingInput { policy: &'static str, input: &'static str },
    #[error("invalid policy parameters: {0}")]
    InvalidParameters(String),
    #[error("unknown policy spec {0:?}")]
    UnknownSpec(String),
}

/// Cumulative alert counters since the episode start and the step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HistorySummary {
    pub x: u64,
    pub y: u64,
    pub z: u64,
    pub t: u32,
}

/// What the simulator can show a policy. Each policy reads only what it
/// declares in [`Policy::requires`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyInput {
    pub summary: Option<HistorySummary>,
    pub belief: Option<BeliefState>,
    /// Whether the intrusion has started; only the oracle may look.
    pub intrusion_active: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Requirements {
    pub summary: bool,
    pub belief: bool,
    pub onset: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub stop_prob: f64,
}

impl Decision {
    fn certain(stop: bool) -> Self {
        if stop {
            Self { action: Action::Stop, stop_prob: 1.0 }
        } else {
            Self { action: Action::Continue, stop_prob: 0.0 }
        }
    }
}

pub trait Policy: Send + Sync {
    fn requires(&self) -> Requirements;

    fn stop_prob(&self, input: &PolicyInput) -> Result<f64, PolicyError>;

    /// Samples an action. Deterministic policies never touch `rng`.
    fn act(&self, input: &PolicyInput, rng: &mut dyn RngCore) -> Result<Decision, PolicyError> {
        let q = self.stop_prob(input)?;
        let stop = if q <= 0.0 {
            false
        } else if q >= 1.0 {
            true
        } else {
            rng.random::<f64>() < q
        };
        Ok(Decision { action: if stop { Action::Stop } else { Action::Continue }, stop_prob: q })
    }
}

/// Which features a neural policy is fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `(x/X_max, y/Y_max, z/Z_max, min(t, T)/T)`.
    #[default]
    Summary,
    /// `(b1, 0, 0, 0)`.
    Belief,
}

/// Scales used to normalize the summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub bounds: Bounds,
    pub max_steps: u32,
}

impl Normalization {
    pub fn features(&self, s: &HistorySummary) -> [f64; INPUT_DIM] {
        let scale = |v: u64, m: u32| v as f64 / f64::from(m.max(1));
        let t = s.t.min(self.max_steps);
        [
            scale(s.x, self.bounds.x_max),
            scale(s.y, self.bounds.y_max),
            scale(s.z, self.bounds.z_max),
            f64::from(t) / f64::from(self.max_steps.max(1)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralPolicy {
    pub params: PolicyParams,
    pub input: InputMode,
    pub norm: Normalization,
    /// Take the more likely action instead of sampling.
    pub deterministic: bool,
}

impl NeuralPolicy {
    pub fn features(&self, input: &PolicyInput) -> Result<[f64; INPUT_DIM], PolicyError> {
        match self.input {
            InputMode::Summary => input
                .summary
                .map(|s| self.norm.features(&s))
                .ok_or(PolicyError::MissingInput { policy: "neural", input: "summary" }),
            InputMode::Belief => input
                .belief
                .map(|b| [b.b1(), 0.0, 0.0, 0.0])
                .ok_or(PolicyError::MissingInput { policy: "neural", input: "belief" }),
        }
    }

    /// Stop probability of the underlying stochastic policy, ignoring the
    /// deterministic flag.
    pub fn sampling_stop_prob(&self, input: &PolicyInput) -> Result<f64, PolicyError> {
        Ok(self.params.forward(&self.features(input)?).stop_prob())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Stop once `b1 >= alpha`.
    BeliefThreshold { alpha: f64 },
    /// Stop at step `k`.
    FixedTime { k: u32 },
    /// Stop once any severe or warning alert has been seen.
    FirstAlert,
    /// Stop as soon as the intrusion is active.
    Oracle,
    Neural(Box<NeuralPolicy>),
    AlwaysContinue,
}

impl PolicyKind {
    pub fn belief_threshold(alpha: f64) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(PolicyError::InvalidParameters(format!("threshold {alpha} outside [0, 1]")));
        }
        Ok(Self::BeliefThreshold { alpha })
    }

    pub fn fixed_time(k: u32) -> Result<Self, PolicyError> {
        if k == 0 {
            return Err(PolicyError::InvalidParameters("fixed stopping time must be at least 1".into()));
        }
        Ok(Self::FixedTime { k })
    }

    /// Parses the compact specs `threshold:A`, `fixed:K`, `first_alert`,
    /// `oracle` and `always_continue`.
    pub fn parse(spec: &str) -> Result<Self, PolicyError> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let bad = || PolicyError::UnknownSpec(spec.to_string());
        match (name, arg) {
            ("threshold", Some(a)) => Self::belief_threshold(a.parse().map_err(|_| bad())?),
            ("fixed", Some(k)) => Self::fixed_time(k.parse().map_err(|_| bad())?),
            ("first_alert", None) => Ok(Self::FirstAlert),
            ("oracle", None) => Ok(Self::Oracle),
            ("always_continue", None) => Ok(Self::AlwaysContinue),
            _ => Err(bad()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BeliefThreshold { .. } => "belief_threshold",
            Self::FixedTime { .. } => "fixed_time",
            Self::FirstAlert => "first_alert",
            Self::Oracle => "oracle",
            Self::Neural(_) => "neural",
            Self::AlwaysContinue => "always_continue",
        }
    }

    fn summary(&self, input: &PolicyInput) -> Result<HistorySummary, PolicyError> {
        input.summary.ok_or(PolicyError::MissingInput { policy: self.name(), input: "summary" })
    }
}

impl Policy for PolicyKind {
    fn requires(&self) -> Requirements {
        match self {
            Self::BeliefThreshold { .. } => Requirements { belief: true, ..Default::default() },
            Self::FixedTime { .. } | Self::FirstAlert => Requirements { summary: true, ..Default::default() },
            Self::Oracle => Requirements { onset: true, ..Default::default() },
            Self::Neural(n) => match n.input {
                InputMode::Summary => Requirements { summary: true, ..Default::default() },
                InputMode::Belief => Requirements { belief: true, ..Default::default() },
            },
            Self::AlwaysContinue => Requirements::default(),
        }
    }

    fn stop_prob(&self, input: &PolicyInput) -> Result<f64, PolicyError> {
        let certain = |stop: bool| Decision::certain(stop).stop_prob;
        match self {
            Self::BeliefThreshold { alpha } => input
                .belief
                .map(|b| certain(b.b1() >= *alpha))
                .ok_or(PolicyError::MissingInput { policy: self.name(), input: "belief" }),
            // also stops past k, so probes beyond the stopping time read as stop
            Self::FixedTime { k } => Ok(certain(self.summary(input)?.t >= *k)),
            Self::FirstAlert => {
                let s = self.summary(input)?;
                Ok(certain(s.x + s.y >= 1))
            }
            Self::Oracle => input
                .intrusion_active
                .map(certain)
                .ok_or(PolicyError::MissingInput { policy: self.name(), input: "onset" }),
            Self::Neural(n) => {
                let q = n.sampling_stop_prob(input)?;
                Ok(if n.deterministic { certain(q >= 0.5) } else { q })
            }
            Self::AlwaysContinue => Ok(0.0),
        }
    }
}

/// Grid over summaries; every combination is probed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub x: Vec<u64>,
    pub y: Vec<u64>,
    pub z: Vec<u64>,
    pub t: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub x: u64,
    pub y: u64,
    pub z: u64,
    pub t: u32,
    pub stop_prob: f64,
    /// `ln(P[stop] / P[continue])` for neural policies. It orders points
    /// exactly like `stop_prob` but keeps its resolution where the
    /// probability has rounded to 0 or 1.
    pub stop_log_odds: Option<f64>,
}

/// Stop probability at every summary in `grid`, ordered by `t`, then `x`,
/// `y`, `z`. Neural policies are probed through their sampling distribution.
pub fn probe_grid(policy: &PolicyKind, grid: &ProbeGrid) -> Result<Vec<ProbeRow>, PolicyError> {
    let mut rows = Vec::with_capacity(grid.x.len() * grid.y.len() * grid.z.len() * grid.t.len());
    for &t in &grid.t {
        for &x in &grid.x {
            for &y in &grid.y {
                for &z in &grid.z {
                    let input = PolicyInput { summary: Some(HistorySummary { x, y, z, t }), ..Default::default() };
                    let (stop_prob, stop_log_odds) = match policy {
                        PolicyKind::Neural(n) => {
                            let o = n.params.forward(&n.features(&input)?);
                            (o.stop_prob(), Some(o.logits[0] - o.logits[1]))
                        }
                        p => (p.stop_prob(&input)?, None),
                    };
                    rows.push(ProbeRow { x, y, z, t, stop_prob, stop_log_odds });
                }
            }
        }
    }
    Ok(rows)
}

/// Stop probability at each belief in `grid`, for belief-driven policies.
pub fn probe_beliefs(policy: &PolicyKind, grid: &[f64]) -> Result<Vec<(f64, f64)>, PolicyError> {
    grid.iter()
        .map(|&b1| {
            let b = BeliefState::new(b1).map_err(|e| PolicyError::InvalidParameters(e.to_string()))?;
            let input = PolicyInput { belief: Some(b), ..Default::default() };
            let q = match policy {
                PolicyKind::Neural(n) => n.sampling_stop_prob(&input)?,
                p => p.stop_prob(&input)?,
            };
            Ok((b1, q))
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their average rank
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Rank correlation between `x + y` and the stop probability over the rows
/// of one `t` slice. Log-odds are used as the rank key when present.
pub fn alert_rank_correlation(rows: &[ProbeRow]) -> Option<f64> {
    let alerts: Vec<f64> = rows.iter().map(|r| (r.x + r.y) as f64).collect();
    let stop: Vec<f64> = rows.iter().map(|r| r.stop_log_odds.unwrap_or(r.stop_prob)).collect();
    spearman(&alerts, &stop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::net::Architecture;
    use crate::rng::{stream, Domain};

    fn at(t: u32, x: u64, y: u64) -> PolicyInput {
        PolicyInput { summary: Some(HistorySummary { x, y, z: 0, t }), ..Default::default() }
    }

    fn belief(b1: f64) -> PolicyInput {
        PolicyInput { belief: Some(BeliefState::new(b1).unwrap()), ..Default::default() }
    }

    fn act(p: &PolicyKind, i: &PolicyInput) -> Action {
        p.act(i, &mut stream(0, Domain::Sampling, 0)).unwrap().action
    }

    #[test]
    fn threshold_examples() {
        let p = PolicyKind::belief_threshold(0.357).unwrap();
        assert_eq!(act(&p, &belief(0.4)), Action::Stop);
        assert_eq!(act(&p, &belief(0.357)), Action::Stop);
        assert_eq!(act(&p, &belief(0.3569)), Action::Continue);
        assert!(PolicyKind::belief_threshold(1.2).is_err());
    }

    #[test]
    fn threshold_is_monotone() {
        let p = PolicyKind::belief_threshold(0.42).unwrap();
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let probe = probe_beliefs(&p, &grid).unwrap();
        assert!(probe.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(probe.iter().all(|&(b, q)| (q == 1.0) == (b >= 0.42)));
    }

    #[test]
    fn fixed_time_and_first_alert() {
        let f = PolicyKind::fixed_time(6).unwrap();
        assert_eq!(act(&f, &at(5, 0, 0)), Action::Continue);
        assert_eq!(act(&f, &at(6, 0, 0)), Action::Stop);
        assert!(PolicyKind::fixed_time(0).is_err());
        let a = PolicyKind::FirstAlert;
        assert_eq!(act(&a, &at(3, 0, 0)), Action::Continue);
        assert_eq!(act(&a, &at(3, 0, 1)), Action::Stop);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let rng = &mut stream(0, Domain::Sampling, 0);
        let err = PolicyKind::Oracle.act(&at(1, 0, 0), rng).unwrap_err();
        assert_eq!(err, PolicyError::MissingInput { policy: "oracle", input: "onset" });
        assert!(PolicyKind::belief_threshold(0.5).unwrap().act(&at(1, 0, 0), rng).is_err());
        assert!(PolicyKind::FirstAlert.act(&belief(0.5), rng).is_err());
    }

    #[test]
    fn always_continue_probes_to_zero() {
        let grid = ProbeGrid { x: vec![0, 10, 200], y: vec![0, 50], z: vec![0], t: vec![1, 10] };
        let rows = probe_grid(&PolicyKind::AlwaysContinue, &grid).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.stop_prob == 0.0));
    }

    #[test]
    fn neural_sampling_replays_with_the_same_stream() {
        let arch = Architecture { input: 4, hidden: vec![8] };
        let mut params = PolicyParams::init(arch, &mut stream(3, Domain::Init, 0));
        let l = params.arch.layers()[1];
        for v in &mut params.values[l.offset..l.offset + l.len()] {
            *v *= 50.0;
        }
        let policy = PolicyKind::Neural(Box::new(NeuralPolicy {
            params,
            input: InputMode::Summary,
            norm: Normalization { bounds: Bounds::new(10, 10, 10), max_steps: 20 },
            deterministic: false,
        }));
        let run = || {
            let mut rng = stream(5, Domain::Sampling, 1);
            (1..50).map(|t| act_with(&policy, &at(t % 20, t as u64, 0), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn act_with(p: &PolicyKind, i: &PolicyInput, rng: &mut dyn RngCore) -> Action {
        p.act(i, rng).unwrap().action
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn parse_and_serde() {
        assert_eq!(PolicyKind::parse("fixed:6").unwrap(), PolicyKind::FixedTime { k: 6 });
        assert_eq!(PolicyKind::parse("threshold:0.357").unwrap(), PolicyKind::BeliefThreshold { alpha: 0.357 });
        assert!(PolicyKind::parse("fixed").is_err());
        assert!(PolicyKind::parse("bogus").is_err());
        let p = PolicyKind::FixedTime { k: 6 };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"kind":"fixed_time","k":6}"#);
        assert_eq!(serde_json::from_str::<PolicyKind>(&s).unwrap(), p);
    }

    #[test]
    fn normalization_guards_zero_bounds_and_clamps_time() {
        let n = Normalization { bounds: Bounds::new(5, 0, 0), max_steps: 200 };
        let f = n.features(&HistorySummary { x: 10, y: 0, z: 0, t: 400 });
        assert_eq!(f, [2.0, 0.0, 0.0, 1.0]);
    }
}
