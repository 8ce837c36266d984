//! The test-time adaptation loop.
//!
//! Row `t` of a trajectory describes the policy after `t` updates: a fresh
//! batch of rollouts is drawn from it, scored, and (for `t < steps`) used for
//! update `t + 1`. Row 0 therefore has `kl_to_ref == 0` exactly.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::canon::{Canonicalizer, EmpiricalDistribution, Scheme};
use crate::error::{Error, Result};
use crate::grpo::{self, AdaptConfig, Rollout, RolloutGroup, ScoredGroup};
use crate::policy::{Policy, Prompt, PromptKind, UnlabeledPrompt};
use crate::reward::{self, RewardSpec};
use crate::rng;
use crate::tasks::{self, TaskData, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean empirical answer entropy of the batch's rollout groups, nats.
    pub mean_group_entropy: f64,
    pub kl_to_ref: f64,
    pub grad_norm: f64,
    pub eval_accuracy: Option<f64>,
    pub degenerate_groups: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean empirical entropy of `n` fresh temperature-1 samples per prompt.
    pub mean_rollout_entropy: f64,
    /// Mean exact policy entropy, for choice prompts.
    pub exact_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    #[serde(flatten)]
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "message", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: AdaptConfig,
    pub logs: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub final_policy: Policy,
    pub seed: u64,
    pub status: RunStatus,
}

impl Trajectory {
    pub fn initial_eval(&self) -> Option<&EvalResult> {
        self.evals.first().map(|e| &e.result)
    }

    pub fn final_eval(&self) -> Option<&EvalResult> {
        self.evals.last().map(|e| &e.result)
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged(_))
    }
}

fn canonicalizer_for(prompt: &Prompt, scheme: Option<Scheme>) -> Result<Canonicalizer> {
    let scheme = scheme.unwrap_or(match prompt.kind {
        PromptKind::Choice => Scheme::McqLetter,
        PromptKind::Sequence => Scheme::Verbatim,
    });
    let single_letters = !prompt.options.is_empty()
        && prompt.options.iter().all(|o| o.chars().count() == 1 && o.chars().all(char::is_alphanumeric));
    if scheme == Scheme::McqLetter && single_letters {
        Canonicalizer::with_alphabet(scheme, &prompt.options.concat())
    } else {
        Ok(Canonicalizer::new(scheme))
    }
}

/// N rollouts for one prompt, each from its own `(seed, tag, step, prompt, j)` substream.
pub fn rollout_group(
    policy: &Policy,
    prompt: &Prompt,
    n: usize,
    temperature: f64,
    canon: &Canonicalizer,
    seed: u64,
    labels: &[u64],
) -> Result<RolloutGroup> {
    let pid = rng::hash_str(&prompt.prompt_id);
    let rollouts = (0..n)
        .map(|j| {
            let mut key = labels.to_vec();
            key.extend([pid, j as u64]);
            let mut stream = rng::substream(seed, &key);
            let s = policy.sample(prompt, temperature, &mut stream)?;
            Ok(Rollout {
                answer: canon.canonicalize(&s.raw),
                raw: s.raw,
                action: s.action,
                behavior_logprob: s.behavior_logprob,
                behavior_token_logprobs: s.behavior_token_logprobs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        prompt_id: prompt.prompt_id.clone(),
        prompt: prompt.clone(),
        rollouts,
        temperature,
    })
}

/// Greedy accuracy and sampled answer entropy. Never touches the adaptation streams.
pub fn evaluate(
    policy: &Policy,
    prompts: &[Prompt],
    n_rollouts: usize,
    scheme: Option<Scheme>,
    seed: u64,
    step: usize,
) -> Result<EvalResult> {
    if prompts.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut hits = 0usize;
    let mut ent = 0.0;
    let mut exact = 0.0;
    let mut all_choice = true;
    for p in prompts {
        let canon = canonicalizer_for(p, scheme)?;
        let action = policy.greedy(p)?;
        let key = canon.key(&policy.action_text(p, &action));
        if p.label.as_deref().map(|l| canon.key(l)) == Some(key) {
            hits += 1;
        }
        let group = rollout_group(policy, p, n_rollouts, 1.0, &canon, seed, &[rng::TAG_EVAL, step as u64])?;
        let dist = EmpiricalDistribution::from_keys(&group.rollouts.iter().map(|r| r.answer.key.as_str()).collect::<Vec<_>>())?;
        ent += reward::entropy(&dist);
        match p.kind {
            PromptKind::Choice => exact += policy.choice_entropy(p)?,
            PromptKind::Sequence => all_choice = false,
        }
    }
    let n = prompts.len() as f64;
    Ok(EvalResult {
        accuracy: hits as f64 / n,
        mean_rollout_entropy: ent / n,
        exact_entropy: all_choice.then_some(exact / n),
    })
}

/// Round-robin over prompt indices with a seeded reshuffle each epoch.
/// A batch never holds the same prompt twice.
struct BatchScheduler {
    n: usize,
    seed: u64,
    epoch: u64,
    queue: VecDeque<usize>,
}

impl BatchScheduler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: 0, queue: VecDeque::new() }
    }

    fn refill(&mut self) {
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut rng::substream(self.seed, &[rng::TAG_BATCH, self.epoch]));
        self.epoch += 1;
        self.queue.extend(perm);
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.n);
        let mut batch = Vec::with_capacity(size);
        let mut seen = HashSet::new();
        let mut deferred = Vec::new();
        while batch.len() < size {
            if self.queue.is_empty() {
                self.refill();
            }
            let i = self.queue.pop_front().expect("refilled");
            if seen.insert(i) {
                batch.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            self.queue.push_front(i);
        }
        batch
    }
}

/// Run test-time adaptation.
///
/// Configuration errors are returned as `Err`; divergence stops the run and is
/// reported through [`Trajectory::status`] with the rows logged so far.
pub fn adapt(
    policy: &Policy,
    adapt_set: &[UnlabeledPrompt],
    config: &AdaptConfig,
    eval_set: Option<&[Prompt]>,
) -> Result<Trajectory> {
    config.validate()?;
    if adapt_set.is_empty() {
        return Err(Error::Config("adaptation set is empty".into()));
    }
    let canons = adapt_set
        .iter()
        .map(|p| canonicalizer_for(p, config.scheme))
        .collect::<Result<Vec<_>>>()?;

    let reference = policy.snapshot();
    let mut current = policy.clone();
    let mut scheduler = BatchScheduler::new(adapt_set.len(), config.seed);
    let mut logs = Vec::with_capacity(config.steps + 1);
    let mut evals = Vec::new();
    let mut status = RunStatus::Completed;

    for step in 0..=config.steps {
        let started = Instant::now();
        let eval_accuracy = match eval_set {
            Some(set) if step % config.eval_interval == 0 || step == config.steps => {
                let r = evaluate(&current, set, config.n_rollouts, config.scheme, config.seed, step)?;
                let acc = r.accuracy;
                evals.push(EvalPoint { step, result: r });
                Some(acc)
            }
            _ => None,
        };
        if config.steps == 0 {
            logs.push(StepLog {
                step,
                mean_reward: 0.0,
                mean_group_entropy: 0.0,
                kl_to_ref: 0.0,
                grad_norm: 0.0,
                eval_accuracy,
                degenerate_groups: 0,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            break;
        }

        let batch_idx = scheduler.next_batch(config.batch_prompts);
        let mut groups = Vec::with_capacity(batch_idx.len());
        for &i in &batch_idx {
            groups.push(rollout_group(
                &current,
                adapt_set[i].prompt(),
                config.n_rollouts,
                config.temperature,
                &canons[i],
                config.seed,
                &[rng::TAG_ROLLOUT, step as u64],
            )?);
        }
        let reward_spec = RewardSpec {
            random_seed: rng::derive_seed(config.reward.random_seed, &[config.seed, step as u64]),
            ..config.reward
        };
        let rewards = groups
            .iter()
            .map(|g| reward::combined_rewards(g, &reward_spec))
            .collect::<Result<Vec<_>>>()?;
        let advs = grpo::advantages(&rewards, config.advantage_scope, config.std_guard)?;
        let mean_group_entropy = rewards.iter().map(|r| r.entropy).sum::<f64>() / rewards.len() as f64;
        let batch: Vec<ScoredGroup> = groups
            .into_iter()
            .zip(rewards)
            .zip(advs)
            .map(|((group, rewards), advantages)| ScoredGroup { group, rewards, advantages })
            .collect();

        let mut log = StepLog {
            step,
            mean_reward: 0.0,
            mean_group_entropy,
            kl_to_ref: 0.0,
            grad_norm: 0.0,
            eval_accuracy,
            degenerate_groups: batch.iter().filter(|g| g.advantages.degenerate).count(),
            wall_ms: 0,
        };
        if step < config.steps {
            match grpo::update(&current, &reference, &batch, config) {
                Ok((next, stats)) => {
                    log.mean_reward = stats.mean_reward;
                    log.kl_to_ref = stats.kl_to_ref;
                    log.grad_norm = stats.grad_norm;
                    current = next;
                }
                Err(Error::Divergence(msg)) => {
                    log.wall_ms = started.elapsed().as_millis() as u64;
                    logs.push(log);
                    status = RunStatus::Diverged(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        } else {
            let total: usize = batch.iter().map(|g| g.group.rollouts.len()).sum();
            log.mean_reward = batch.iter().flat_map(|g| &g.rewards.values).sum::<f64>() / total as f64;
            let mut kl = 0.0;
            for g in &batch {
                kl += current.kl_divergence(&reference, &g.group.prompt, &g.group.actions())?;
            }
            log.kl_to_ref = kl / batch.len() as f64;
        }
        log.wall_ms = started.elapsed().as_millis() as u64;
        logs.push(log);
    }

    Ok(Trajectory {
        config: config.clone(),
        logs,
        evals,
        final_policy: current,
        seed: config.seed,
        status,
    })
}

/// Split a task, strip labels from the adaptation prompts, and adapt.
pub fn run_task(task: &TaskData, adapt_size: usize, config: &AdaptConfig) -> Result<Trajectory> {
    let (adapt_prompts, eval) = task.split(adapt_size)?;
    let adapt_set: Vec<UnlabeledPrompt> = adapt_prompts.iter().map(Prompt::unlabeled).collect();
    adapt(&task.base, &adapt_set, config, Some(&eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: crate::reward::RewardMode,
    pub alpha: f64,
    pub initial_accuracy: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: crate::reward::RewardMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,alpha,seeds,mean_initial_accuracy,mean_final_accuracy,mean_delta,std_delta,diverged\n");
        for r in &self.rows {
            let init = r.initial_accuracy.iter().sum::<f64>() / r.initial_accuracy.len().max(1) as f64;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.mode, r.alpha, self.seeds.len(), init, r.mean_final_accuracy, r.mean_delta, r.std_delta, r.diverged
            ));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Paired comparison of reward modes: every mode sees the same task data and
/// the same run seeds, so rollouts coincide wherever the policies do.
pub fn run_ablation_suite(
    task: &TaskSpec,
    rewards: &[RewardSpec],
    config: &AdaptConfig,
    seeds: &[u64],
    adapt_size: usize,
) -> Result<AblationTable> {
    let data = tasks::generate(task)?;
    let mut rows = Vec::with_capacity(rewards.len());
    for spec in rewards {
        let (mut init, mut fin, mut deltas) = (Vec::new(), Vec::new(), Vec::new());
        let mut diverged = 0;
        for &seed in seeds {
            let cfg = AdaptConfig { seed, reward: *spec, ..config.clone() };
            let traj = run_task(&data, adapt_size, &cfg)?;
            if traj.diverged() {
                diverged += 1;
            }
            let a0 = traj.initial_eval().map_or(0.0, |e| e.accuracy);
            let a1 = traj.final_eval().map_or(0.0, |e| e.accuracy);
            init.push(a0);
            fin.push(a1);
            deltas.push(a1 - a0);
        }
        let (mean_delta, std_delta) = mean_std(&deltas);
        rows.push(AblationRow {
            mode: spec.mode,
            alpha: spec.alpha,
            mean_final_accuracy: mean_std(&fin).0,
            initial_accuracy: init,
            final_accuracy: fin,
            mean_delta,
            std_delta,
            diverged,
        });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
