//! Clipped-surrogate loss, its analytic gradient, GAE and the optimizer.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::net::{action_index, PolicyParams, ACTIONS, INPUT_DIM};
use super::LearnerError;
use crate::model::Action;

/// How a step relates to the end of its episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepEnd {
    /// The next transition belongs to the same episode.
    Running,
    /// The episode ended after this step; nothing follows.
    Terminal,
    /// The batch was cut here; `bootstrap` is the critic's value of the next state.
    Truncated { bootstrap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: [f64; INPUT_DIM],
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub end: StepEnd,
}

pub type Trajectory = Vec<Transition>;

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, reset at episode ends;
/// returns are `A_t + V_t`. A trailing `Running` step is treated as terminal.
pub fn gae_advantages(traj: &[Transition], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.len();
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let s = &traj[t];
        match s.end {
            StepEnd::Running if t + 1 < n => {}
            StepEnd::Truncated { bootstrap } => {
                next_value = bootstrap;
                next_adv = 0.0;
            }
            _ => {
                next_value = 0.0;
                next_adv = 0.0;
            }
        }
        let delta = s.reward + gamma * next_value - s.value;
        adv[t] = delta + gamma * lambda * next_adv;
        next_value = s.value;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(traj).map(|(a, s)| a + s.value).collect();
    (adv, returns)
}

/// Training samples with their advantage targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<[f64; INPUT_DIM]>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn from_trajectory(traj: &[Transition], gamma: f64, lambda: f64, normalize: bool) -> Self {
        let (mut advantages, returns) = gae_advantages(traj, gamma, lambda);
        if normalize && advantages.len() > 1 {
            let n = advantages.len() as f64;
            let mean = advantages.iter().sum::<f64>() / n;
            let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt() + 1e-8;
            for a in &mut advantages {
                *a = (*a - mean) / sd;
            }
        }
        Self {
            inputs: traj.iter().map(|s| s.input).collect(),
            actions: traj.iter().map(|s| s.action).collect(),
            old_log_probs: traj.iter().map(|s| s.log_prob).collect(),
            advantages,
            returns,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
}

/// Mean loss terms over a minibatch. `total = policy + value_coef * value -
/// entropy_coef * entropy`, where `policy` is the negated clipped surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` and whether the clipped branch is
/// the active one (which zeroes the gradient).
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Loss over `idx`; when `grad` is given, its gradient is added to it.
pub fn loss_and_grad(params: &PolicyParams, batch: &Batch, idx: &[usize], cfg: &LossConfig, mut grad: Option<&mut [f64]>) -> LossBreakdown {
    let n = idx.len() as f64;
    let mut l = LossBreakdown::default();
    let mut clipped_count = 0usize;
    for &i in idx {
        let pass = params.forward_cached(&batch.inputs[i]);
        let out = pass.out;
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let ratio = (out.log_prob(a) - batch.old_log_probs[i]).exp();
        let (obj, clipped) = clipped_surrogate(ratio, adv, cfg.clip_epsilon);
        let h = out.entropy();
        let err = out.value - batch.returns[i];
        l.policy -= obj / n;
        l.value += err * err / n;
        l.entropy += h / n;
        l.mean_ratio += ratio / n;
        clipped_count += usize::from(clipped);
        if let Some(g) = grad.as_deref_mut() {
            let mut dz = [0.0; ACTIONS];
            for (j, d) in dz.iter_mut().enumerate() {
                let onehot = if j == action_index(a) { 1.0 } else { 0.0 };
                if !clipped {
                    *d -= adv * ratio * (onehot - out.probs[j]) / n;
                }
                let logp = if out.probs[j] > 0.0 { out.probs[j].ln() } else { 0.0 };
                *d += cfg.entropy_coef * out.probs[j] * (logp + h) / n;
            }
            let dv = 2.0 * cfg.value_coef * err / n;
            params.backward(&pass, dz, dv, g);
        }
    }
    l.total = l.policy + cfg.value_coef * l.value - cfg.entropy_coef * l.entropy;
    l.clip_fraction = clipped_count as f64 / n;
    l
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Gradient descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Mean diagnostics of one update pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    pub gradient_steps: usize,
}

/// `epochs` shuffled passes of minibatch Adam steps over `batch`.
pub fn ppo_update(
    params: &mut PolicyParams,
    batch: &Batch,
    cfg: &LossConfig,
    epochs: usize,
    minibatch: usize,
    adam: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<UpdateStats, LearnerError> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut stats = UpdateStats::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(minibatch.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let l = loss_and_grad(params, batch, chunk, cfg, Some(&mut grad));
            if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                return Err(LearnerError::NonFiniteGradient { index });
            }
            if stats.gradient_steps == 0 {
                stats.first = l;
            }
            stats.last = l;
            stats.gradient_steps += 1;
            adam.step(&mut params.values, &grad);
        }
    }
    Ok(stats)
}

/// Worst relative difference between an analytic gradient and central
/// finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_PARAM_LIMIT: usize = 1000;
/// Gradients smaller than this are compared in absolute terms.
const FD_FLOOR: f64 = 1e-6;

/// Compares `analytic` with central differences of the full-batch loss.
pub fn compare_gradient(params: &PolicyParams, batch: &Batch, cfg: &LossConfig, analytic: &[f64]) -> Result<GradientCheck, LearnerError> {
    if params.len() > FD_PARAM_LIMIT {
        return Err(LearnerError::TooManyParameters { count: params.len(), limit: FD_PARAM_LIMIT });
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut probe = params.clone();
    let mut worst = GradientCheck { max_relative_error: 0.0, index: 0, analytic: 0.0, numeric: 0.0 };
    for k in 0..params.len() {
        let base = params.values[k];
        probe.values[k] = base + FD_STEP;
        let up = loss_and_grad(&probe, batch, &idx, cfg, None).total;
        probe.values[k] = base - FD_STEP;
        let down = loss_and_grad(&probe, batch, &idx, cfg, None).total;
        probe.values[k] = base;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(FD_FLOOR);
        if err > worst.max_relative_error {
            worst = GradientCheck { max_relative_error: err, index: k, analytic: analytic[k], numeric };
        }
    }
    Ok(worst)
}

/// Analytic gradient of the full-batch loss checked against finite differences.
pub fn finite_diff_check(params: &PolicyParams, batch: &Batch, cfg: &LossConfig) -> Result<GradientCheck, LearnerError> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; params.len()];
    loss_and_grad(params, batch, &idx, cfg, Some(&mut grad));
    compare_gradient(params, batch, cfg, &grad)
}
