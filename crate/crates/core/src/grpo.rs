//! Group-relative advantages and the policy update.
//!
//! Rewards are standardized with the mean and population standard deviation of
//! either each rollout group or the whole batch. When that standard deviation
//! falls below `std_guard`, every advantage in the scope is exactly zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canon::{CanonicalAnswer, RawResponse, Scheme};
use crate::error::{Error, Result};
use crate::policy::{Action, Policy, PolicySnapshot, Prompt};
use crate::reward::{RewardSpec, RewardVector};

/// Gradient norms above this are treated as divergence.
pub const MAX_GRAD_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageScope {
    PerGroup,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Reinforce,
    Clipped,
}

macro_rules! str_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(AdvantageScope, AdvantageScope::PerGroup => "per_group", AdvantageScope::PerBatch => "per_batch");
str_enum!(Objective, Objective::Reinforce => "reinforce", Objective::Clipped => "clipped");

#[derive(Debug, Clone)]
pub struct Rollout {
    pub raw: RawResponse,
    pub action: Action,
    pub answer: CanonicalAnswer,
    /// Log-probability at the sampling temperature, summed over tokens.
    pub behavior_logprob: f64,
    pub behavior_token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub prompt: Prompt,
    pub rollouts: Vec<Rollout>,
    pub temperature: f64,
}

impl RolloutGroup {
    pub fn actions(&self) -> Vec<Action> {
        self.rollouts.iter().map(|r| r.action.clone()).collect()
    }

    pub fn answers(&self) -> Vec<CanonicalAnswer> {
        self.rollouts.iter().map(|r| r.answer.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub scope: AdvantageScope,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub n_rollouts: usize,
    pub temperature: f64,
    pub lr: f64,
    pub kl_beta: f64,
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub advantage_scope: AdvantageScope,
    pub objective: Objective,
    pub std_guard: f64,
    pub steps: usize,
    pub batch_prompts: usize,
    pub eval_interval: usize,
    /// `None` picks `mcq-letter` for choice prompts and `verbatim` for sequences.
    pub scheme: Option<Scheme>,
    pub seed: u64,
    pub reward: RewardSpec,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 32,
            temperature: 1.0,
            lr: 0.05,
            kl_beta: 0.01,
            clip_eps: 0.2,
            inner_epochs: 1,
            advantage_scope: AdvantageScope::PerBatch,
            objective: Objective::Clipped,
            std_guard: 1e-8,
            steps: 100,
            batch_prompts: 8,
            eval_interval: 5,
            scheme: None,
            seed: 0,
            reward: RewardSpec::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_owned()));
        if self.n_rollouts == 0 {
            return bad("n_rollouts must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and > 0");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be finite and >= 0");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return bad("clip_eps must be finite and > 0");
        }
        if !(self.std_guard > 0.0 && self.std_guard.is_finite()) {
            return bad("std_guard must be finite and > 0");
        }
        if self.inner_epochs == 0 || self.batch_prompts == 0 || self.eval_interval == 0 {
            return bad("inner_epochs, batch_prompts and eval_interval must be positive");
        }
        self.reward.validate()
    }
}

fn standardize(values: &[f64], std_guard: f64) -> Option<(f64, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (std >= std_guard).then_some((mean, std))
}

/// One advantage vector per reward vector, standardized over `scope`.
pub fn advantages(
    rewards: &[RewardVector],
    scope: AdvantageScope,
    std_guard: f64,
) -> Result<Vec<AdvantageVector>> {
    if rewards.iter().any(|r| r.values.is_empty()) {
        return Err(Error::EmptyGroup);
    }
    let apply = |values: &[f64], stats: Option<(f64, f64)>| match stats {
        Some((mean, std)) => AdvantageVector {
            values: values.iter().map(|v| (v - mean) / std).collect(),
            scope,
            degenerate: false,
        },
        None => AdvantageVector {
            values: vec![0.0; values.len()],
            scope,
            degenerate: true,
        },
    };
    Ok(match scope {
        AdvantageScope::PerGroup => rewards
            .iter()
            .map(|r| apply(&r.values, standardize(&r.values, std_guard)))
            .collect(),
        AdvantageScope::PerBatch => {
            let all: Vec<f64> = rewards.iter().flat_map(|r| r.values.iter().copied()).collect();
            if all.is_empty() {
                return Ok(Vec::new());
            }
            let stats = standardize(&all, std_guard);
            rewards.iter().map(|r| apply(&r.values, stats)).collect()
        }
    })
}

/// A rollout group with its rewards and advantages, ready for an update.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub rewards: RewardVector,
    pub advantages: AdvantageVector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Norm of the ascent direction in the first inner epoch.
    pub grad_norm: f64,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    /// Mean KL(pi_theta || pi_ref) over groups, before the update.
    pub kl_to_ref: f64,
    /// Fraction of token terms whose clipped branch was active (clipped objective only).
    pub clip_fraction: f64,
    pub degenerate_groups: usize,
}

/// The per-token clipped surrogate term `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

fn total_rollouts(batch: &[ScoredGroup]) -> usize {
    batch.iter().map(|g| g.group.rollouts.len()).sum()
}

fn base_stats(policy: &Policy, reference: &PolicySnapshot, batch: &[ScoredGroup]) -> Result<StepStats> {
    let total = total_rollouts(batch).max(1) as f64;
    let mut kl = 0.0;
    for g in batch {
        kl += policy.kl_divergence(reference, &g.group.prompt, &g.group.actions())?;
    }
    Ok(StepStats {
        grad_norm: 0.0,
        mean_reward: batch.iter().flat_map(|g| &g.rewards.values).sum::<f64>() / total,
        mean_advantage: batch.iter().flat_map(|g| &g.advantages.values).sum::<f64>() / total,
        kl_to_ref: if batch.is_empty() { 0.0 } else { kl / batch.len() as f64 },
        clip_fraction: 0.0,
        degenerate_groups: batch.iter().filter(|g| g.advantages.degenerate).count(),
    })
}

fn check_aligned(batch: &[ScoredGroup]) -> Result<()> {
    for g in batch {
        let n = g.group.rollouts.len();
        if g.rewards.values.len() != n || g.advantages.values.len() != n {
            return Err(Error::Config(format!(
                "group {:?}: {} rollouts, {} rewards, {} advantages",
                g.group.prompt_id,
                n,
                g.rewards.values.len(),
                g.advantages.values.len()
            )));
        }
    }
    Ok(())
}

fn kl_ascent(
    policy: &Policy,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    beta: f64,
    grad: &mut [f64],
) -> Result<()> {
    if beta == 0.0 || batch.is_empty() {
        return Ok(());
    }
    let scale = -beta / batch.len() as f64;
    for g in batch {
        policy.accumulate_kl_grad(reference, &g.group.prompt, &g.group.actions(), scale, grad)?;
    }
    Ok(())
}

fn apply_ascent(policy: &mut Policy, grad: &[f64], lr: f64) -> Result<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    if norm > MAX_GRAD_NORM {
        return Err(Error::Divergence(format!("gradient norm {norm:e} exceeds {MAX_GRAD_NORM:e}")));
    }
    for (t, g) in policy.theta_mut().iter_mut().zip(grad) {
        *t += lr * g;
    }
    if policy.theta().iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence("non-finite parameters".into()));
    }
    Ok(norm)
}

/// Ascent direction of the plain estimator:
/// `(1/total) sum_j A_j grad log pi(y_j) - beta * mean_groups grad KL`.
pub fn reinforce_gradient(
    policy: &Policy,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    kl_beta: f64,
) -> Result<Vec<f64>> {
    check_aligned(batch)?;
    let total = total_rollouts(batch).max(1) as f64;
    let mut grad = vec![0.0; policy.theta().len()];
    for g in batch {
        for (r, a) in g.group.rollouts.iter().zip(&g.advantages.values) {
            if *a == 0.0 {
                continue;
            }
            let w = vec![a / total; r.action.len()];
            policy.accumulate_token_grads(&g.group.prompt, &r.action, g.group.temperature, &w, &mut grad)?;
        }
    }
    kl_ascent(policy, reference, batch, kl_beta, &mut grad)?;
    Ok(grad)
}

pub fn reinforce_step(
    policy: &Policy,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    config: &AdaptConfig,
) -> Result<(Policy, StepStats)> {
    let mut stats = base_stats(policy, reference, batch)?;
    let grad = reinforce_gradient(policy, reference, batch, config.kl_beta)?;
    let mut next = policy.clone();
    stats.grad_norm = apply_ascent(&mut next, &grad, config.lr)?;
    Ok((next, stats))
}

/// Ascent direction of the clipped surrogate at the current parameters.
///
/// Token terms are summed within a rollout and averaged over rollouts, so with
/// all ratios equal to 1 this equals [`reinforce_gradient`].
/// Returns the gradient, the surrogate value and the clipped fraction.
pub fn clipped_gradient(
    policy: &Policy,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    check_aligned(batch)?;
    let total = total_rollouts(batch).max(1) as f64;
    let mut grad = vec![0.0; policy.theta().len()];
    let mut surrogate = 0.0;
    let (mut clipped, mut terms) = (0usize, 0usize);
    for g in batch {
        let prompt = &g.group.prompt;
        for (r, &a) in g.group.rollouts.iter().zip(&g.advantages.values) {
            let current = policy.token_logprobs(prompt, &r.action, g.group.temperature)?;
            if current.len() != r.behavior_token_logprobs.len() {
                return Err(Error::Config("behavior log-probs do not match rollout length".into()));
            }
            let mut weights = Vec::with_capacity(current.len());
            for (lp, blp) in current.iter().zip(&r.behavior_token_logprobs) {
                let ratio = (lp - blp).exp();
                let term = clipped_term(ratio, a, clip_eps);
                surrogate += term / total;
                terms += 1;
                // The unclipped branch carries the gradient; the clipped one is constant.
                if ratio * a <= term {
                    weights.push(ratio * a / total);
                } else {
                    clipped += 1;
                    weights.push(0.0);
                }
            }
            if weights.iter().any(|w| *w != 0.0) {
                policy.accumulate_token_grads(prompt, &r.action, g.group.temperature, &weights, &mut grad)?;
            }
        }
    }
    kl_ascent(policy, reference, batch, kl_beta, &mut grad)?;
    let frac = if terms == 0 { 0.0 } else { clipped as f64 / terms as f64 };
    Ok((grad, surrogate, frac))
}

pub fn clipped_step(
    policy: &Policy,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    config: &AdaptConfig,
) -> Result<(Policy, StepStats)> {
    let mut stats = base_stats(policy, reference, batch)?;
    let mut next = policy.clone();
    for epoch in 0..config.inner_epochs {
        let (grad, _, frac) = clipped_gradient(&next, reference, batch, config.clip_eps, config.kl_beta)?;
        let norm = apply_ascent(&mut next, &grad, config.lr)?;
        if epoch == 0 {
            stats.grad_norm = norm;
        }
        stats.clip_fraction = frac;
    }
    Ok((next, stats))
}

pub fn update(
    policy: &Policy,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    config: &AdaptConfig,
) -> Result<(Policy, StepStats)> {
    match config.objective {
        Objective::Reinforce => reinforce_step(policy, reference, batch, config),
        Objective::Clipped => clipped_step(policy, reference, batch, config),
    }
}
