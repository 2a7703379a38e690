use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{IntrusionState, ModelError};

/// Largest observation space the exact solver will enumerate.
pub const MAX_ENUMERATED_OBSERVATIONS: usize = 10_000;

const SUM_TOLERANCE: f64 = 1e-9;

/// Counter increments observed during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Counts {
    /// Severe IDS alerts.
    pub dx: u32,
    /// Warning IDS alerts.
    pub dy: u32,
    /// Login attempts.
    pub dz: u32,
}

impl Counts {
    pub const fn new(dx: u32, dy: u32, dz: u32) -> Self {
        Self { dx, dy, dz }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    Counts(Counts),
    Terminal,
}

/// Inclusive upper bounds of the three counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_max: u32,
    pub y_max: u32,
    pub z_max: u32,
}

impl Bounds {
    pub const fn new(x_max: u32, y_max: u32, z_max: u32) -> Self {
        Self { x_max, y_max, z_max }
    }

    pub fn contains(&self, c: &Counts) -> bool {
        c.dx <= self.x_max && c.dy <= self.y_max && c.dz <= self.z_max
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::new(1000, 1000, 1000)
    }
}

/// Finite probability mass function over a sorted support.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf<T> {
    support: Vec<T>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl<T: Ord + Copy> Pmf<T> {
    /// Normalizes non-negative weights. Duplicate atoms are merged and
    /// zero-weight atoms dropped.
    pub fn from_weights(weights: impl IntoIterator<Item = (T, f64)>) -> Result<Self, ModelError> {
        let mut merged: BTreeMap<T, f64> = BTreeMap::new();
        for (v, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(ModelError::InvalidModel(format!("weight {w} is not a finite non-negative number")));
            }
            if w > 0.0 {
                *merged.entry(v).or_insert(0.0) += w;
            }
        }
        let total: f64 = merged.values().sum();
        if merged.is_empty() || !(total > 0.0) {
            return Err(ModelError::InvalidModel("pmf has no positive mass".into()));
        }
        let (support, probs) = merged.into_iter().map(|(v, w)| (v, w / total)).unzip();
        Ok(Self::assemble(support, probs))
    }

    /// Takes probabilities verbatim. They must already sum to one.
    pub fn from_probs(support: Vec<T>, probs: Vec<f64>) -> Result<Self, ModelError> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(ModelError::InvalidModel("support and probability arrays differ in length or are empty".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidModel("support must be strictly increasing".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ModelError::InvalidModel("probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(ModelError::InvalidModel(format!("probabilities sum to {total}")));
        }
        Ok(Self::assemble(support, probs))
    }

    fn assemble(support: Vec<T>, probs: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { support, probs, cdf }
    }

    pub fn point(v: T) -> Self {
        Self::assemble(vec![v], vec![1.0])
    }

    pub fn prob(&self, v: T) -> f64 {
        self.support.binary_search(&v).map_or(0.0, |i| self.probs[i])
    }

    /// Inverse-CDF draw; consumes exactly one `f64` from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c <= u).min(self.support.len() - 1);
        self.support[i]
    }

    pub fn support(&self) -> &[T] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (T, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn max_value(&self) -> T {
        *self.support.last().expect("pmf support is never empty")
    }
}

/// Distribution of one step's counters: either three independent marginals or
/// a joint table.
#[derive(Debug, Clone, PartialEq)]
pub enum CounterPmf {
    Product { x: Pmf<u32>, y: Pmf<u32>, z: Pmf<u32> },
    Joint(Pmf<Counts>),
}

impl CounterPmf {
    pub fn prob(&self, c: &Counts) -> f64 {
        match self {
            Self::Product { x, y, z } => {
                let px = x.prob(c.dx);
                if px == 0.0 {
                    return 0.0;
                }
                px * y.prob(c.dy) * z.prob(c.dz)
            }
            Self::Joint(j) => j.prob(*c),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Counts {
        match self {
            Self::Product { x, y, z } => {
                let dx = x.sample(rng);
                let dy = y.sample(rng);
                let dz = z.sample(rng);
                Counts { dx, dy, dz }
            }
            Self::Joint(j) => j.sample(rng),
        }
    }

    pub fn support_size(&self) -> u128 {
        match self {
            Self::Product { x, y, z } => x.len() as u128 * y.len() as u128 * z.len() as u128,
            Self::Joint(j) => j.len() as u128,
        }
    }

    fn fits(&self, b: &Bounds) -> bool {
        match self {
            Self::Product { x, y, z } => x.max_value() <= b.x_max && y.max_value() <= b.y_max && z.max_value() <= b.z_max,
            Self::Joint(j) => j.support().iter().all(|c| b.contains(c)),
        }
    }

    fn extend_support(&self, out: &mut BTreeSet<Counts>) {
        match self {
            Self::Product { x, y, z } => {
                for &dx in x.support() {
                    for &dy in y.support() {
                        for &dz in z.support() {
                            out.insert(Counts { dx, dy, dz });
                        }
                    }
                }
            }
            Self::Joint(j) => out.extend(j.support().iter().copied()),
        }
    }
}

/// A counter distribution together with the number of records it was
/// estimated from (1 for synthetic models).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPmf {
    pub dist: CounterPmf,
    pub sample_count: u64,
}

/// Key of one distribution: intrusion flag and attacker phase. Phase 0 is used
/// exactly when there is no intrusion; phase `k >= 1` is the `k`-th step of the
/// intrusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseKey {
    pub intrusion: bool,
    pub phase: u32,
}

impl PhaseKey {
    pub const NO_INTRUSION: PhaseKey = PhaseKey { intrusion: false, phase: 0 };

    pub const fn intrusion(phase: u32) -> Self {
        Self { intrusion: true, phase }
    }
}

/// Observation distributions keyed by (intrusion state, attacker phase).
///
/// A query for an intrusion phase that has no entry of its own falls back to
/// the largest stored phase below it, so a model with a single phase-1 entry
/// applies to the whole intrusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    bounds: Bounds,
    entries: BTreeMap<PhaseKey, EmpiricalPmf>,
    intrusion_weights: Vec<(PhaseKey, f64)>,
}

impl ObservationModel {
    pub fn new(bounds: Bounds, entries: impl IntoIterator<Item = (PhaseKey, EmpiricalPmf)>) -> Result<Self, ModelError> {
        let entries: BTreeMap<_, _> = entries.into_iter().collect();
        if !entries.contains_key(&PhaseKey::NO_INTRUSION) {
            return Err(ModelError::InvalidModel("missing the no-intrusion distribution".into()));
        }
        for (key, e) in &entries {
            if key.intrusion == (key.phase == 0) {
                return Err(ModelError::InvalidModel(format!(
                    "phase {} is not valid for intrusion={}",
                    key.phase, key.intrusion
                )));
            }
            if !e.dist.fits(&bounds) {
                return Err(ModelError::InvalidModel(format!("support of {key:?} exceeds the counter bounds")));
            }
            if e.sample_count == 0 {
                return Err(ModelError::InvalidModel(format!("{key:?} has zero samples")));
            }
        }
        let total: f64 = entries.iter().filter(|(k, _)| k.intrusion).map(|(_, e)| e.sample_count as f64).sum();
        if total == 0.0 {
            return Err(ModelError::InvalidModel("missing an intrusion distribution".into()));
        }
        let intrusion_weights = entries
            .iter()
            .filter(|(k, _)| k.intrusion)
            .map(|(k, e)| (*k, e.sample_count as f64 / total))
            .collect();
        Ok(Self { bounds, entries, intrusion_weights })
    }

    /// Two-entry model: one distribution before and one during the intrusion.
    pub fn two_state(bounds: Bounds, no_intrusion: CounterPmf, intrusion: CounterPmf) -> Result<Self, ModelError> {
        Self::new(
            bounds,
            [
                (PhaseKey::NO_INTRUSION, EmpiricalPmf { dist: no_intrusion, sample_count: 1 }),
                (PhaseKey::intrusion(1), EmpiricalPmf { dist: intrusion, sample_count: 1 }),
            ],
        )
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn entries(&self) -> impl Iterator<Item = (&PhaseKey, &EmpiricalPmf)> {
        self.entries.iter()
    }

    pub fn resolve(&self, state: IntrusionState, phase: u32) -> Result<&EmpiricalPmf, ModelError> {
        let unknown = || ModelError::UnknownPhase { state, phase };
        match state {
            IntrusionState::NoIntrusion if phase == 0 => self.entries.get(&PhaseKey::NO_INTRUSION).ok_or_else(unknown),
            IntrusionState::Intrusion if phase >= 1 => self
                .entries
                .range(PhaseKey::intrusion(1)..=PhaseKey::intrusion(phase))
                .next_back()
                .map(|(_, e)| e)
                .ok_or_else(unknown),
            _ => Err(unknown()),
        }
    }

    /// Probability of `o` in `state` at attacker `phase`.
    pub fn pmf(&self, o: &Observation, state: IntrusionState, phase: u32) -> Result<f64, ModelError> {
        match (o, state) {
            (Observation::Terminal, IntrusionState::Terminal) => Ok(1.0),
            (Observation::Counts(_), IntrusionState::Terminal) => Ok(0.0),
            (Observation::Terminal, s) => self.resolve(s, phase).map(|_| 0.0),
            (Observation::Counts(c), s) => {
                let e = self.resolve(s, phase)?;
                Ok(if self.bounds.contains(c) { e.dist.prob(c) } else { 0.0 })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: IntrusionState, phase: u32, rng: &mut R) -> Result<Observation, ModelError> {
        if state == IntrusionState::Terminal {
            return Ok(Observation::Terminal);
        }
        Ok(Observation::Counts(self.resolve(state, phase)?.dist.sample(rng)))
    }

    /// State-conditioned likelihood; intrusion phases are mixed in proportion
    /// to their sample counts.
    pub fn state_prob(&self, c: &Counts, intrusion: bool) -> f64 {
        if !self.bounds.contains(c) {
            return 0.0;
        }
        if intrusion {
            self.intrusion_weights.iter().map(|(k, w)| w * self.entries[k].dist.prob(c)).sum()
        } else {
            self.entries[&PhaseKey::NO_INTRUSION].dist.prob(c)
        }
    }

    pub fn intrusion_phases(&self) -> impl Iterator<Item = u32> + '_ {
        self.intrusion_weights.iter().map(|(k, _)| k.phase)
    }

    /// Every counter triple with positive probability under some key.
    pub fn enumerate_support(&self, limit: usize) -> Result<Vec<Counts>, ModelError> {
        let size: u128 = self.entries.values().map(|e| e.dist.support_size()).sum();
        if size > limit as u128 {
            return Err(ModelError::ObservationSpaceTooLarge { size, limit });
        }
        let mut all = BTreeSet::new();
        for e in self.entries.values() {
            e.dist.extend_support(&mut all);
        }
        Ok(all.into_iter().collect())
    }
}
