//! Self-supervised rewards computed from a group's empirical answer distribution.
//!
//! The TTRV reward of rollout `j` is `p(key_j) - alpha * H(P)`: the empirical
//! probability of its own answer plus `alpha` times the negative Shannon
//! entropy (nats) of the whole group. The remaining modes are ablation baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon::{CanonicalAnswer, EmpiricalDistribution};
use crate::error::{Error, Result};
use crate::rng;

pub use crate::canon::{build_distribution, DistEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Ttrv,
    FreqOnly,
    EntropyOnly,
    Majority,
    Random,
}

impl RewardMode {
    pub const ALL: [RewardMode; 5] = [
        RewardMode::Ttrv,
        RewardMode::FreqOnly,
        RewardMode::EntropyOnly,
        RewardMode::Majority,
        RewardMode::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Ttrv => "ttrv",
            RewardMode::FreqOnly => "freq_only",
            RewardMode::EntropyOnly => "entropy_only",
            RewardMode::Majority => "majority",
            RewardMode::Random => "random",
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown reward mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub mode: RewardMode,
    pub alpha: f64,
    pub random_seed: u64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            mode: RewardMode::Ttrv,
            alpha: 0.75,
            random_seed: 0,
        }
    }
}

impl RewardSpec {
    pub fn new(mode: RewardMode, alpha: f64) -> Self {
        Self {
            mode,
            alpha,
            random_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub values: Vec<f64>,
    pub mode: RewardMode,
    /// H(P) of the group in nats, recorded for every mode.
    pub entropy: f64,
}

/// r1: the empirical probability of the rollout's own answer.
pub fn frequency_reward(dist: &EmpiricalDistribution, answer: &CanonicalAnswer) -> Result<f64> {
    dist.prob(&answer.key)
        .ok_or_else(|| Error::AnswerNotInDistribution(answer.key.clone()))
}

/// Shannon entropy in nats. Entries always have `p > 0`, so no `0 log 0` term arises.
pub fn entropy(dist: &EmpiricalDistribution) -> f64 {
    let h: f64 = dist.entries().iter().map(|e| -e.p * e.p.ln()).sum();
    // A single entry gives -1 * ln 1 = -0.0.
    h.max(0.0)
}

/// Reward vector for one group of canonical answers.
///
/// `prompt_id` only matters for `random` mode, where it keys the generator.
pub fn group_rewards(
    prompt_id: &str,
    answers: &[CanonicalAnswer],
    spec: &RewardSpec,
) -> Result<RewardVector> {
    let dist = build_distribution(answers)?;
    let h = entropy(&dist);
    let values = match spec.mode {
        RewardMode::Ttrv => answers
            .iter()
            .map(|a| Ok(frequency_reward(&dist, a)? - spec.alpha * h))
            .collect::<Result<Vec<_>>>()?,
        RewardMode::FreqOnly => answers
            .iter()
            .map(|a| frequency_reward(&dist, a))
            .collect::<Result<Vec<_>>>()?,
        RewardMode::EntropyOnly => vec![-h; answers.len()],
        RewardMode::Majority => {
            let modal = &dist.mode().key;
            answers
                .iter()
                .map(|a| if &a.key == modal { 1.0 } else { 0.0 })
                .collect()
        }
        RewardMode::Random => {
            let pid = rng::hash_str(prompt_id);
            (0..answers.len())
                .map(|j| {
                    rng::substream(spec.random_seed, &[rng::TAG_RANDOM_REWARD, pid, j as u64])
                        .random::<f64>()
                })
                .collect()
        }
    };
    Ok(RewardVector {
        values,
        mode: spec.mode,
        entropy: h,
    })
}

pub fn combined_rewards(
    group: &crate::grpo::RolloutGroup,
    spec: &RewardSpec,
) -> Result<RewardVector> {
    let answers: Vec<CanonicalAnswer> = group.rollouts.iter().map(|r| r.answer.clone()).collect();
    group_rewards(&group.prompt_id, &answers, spec)
}
