//! Small differentiable stochastic policies.
//!
//! Three parameterizations share one flat parameter vector `theta`:
//!
//! * `tabular`: one logit row of width `k` per known prompt id.
//! * `linear_softmax`: `logits = W x + b` with `W` (`k x d`, row-major) followed by `b`.
//! * `ngram_seq`: autoregressive table of `(vocab + 1)^order` rows of width `vocab`,
//!   indexed by the previous `order` tokens (padded with a BOS symbol `vocab`).
//!   Token [`END_TOKEN`] terminates a sequence.
//!
//! Every log-probability gradient is `(onehot(y) - softmax(z / T)) / T` pushed
//! back through the logit parameterization.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon::{CanonicalAnswer, RawResponse, Scheme};
use crate::error::{Error, Result};

pub const END_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Choice,
    Sequence,
}

/// One unlabeled or labeled input.
///
/// `label` is the canonical key of the correct answer: an option key for
/// choice prompts, the space-joined token ids (without [`END_TOKEN`]) for
/// sequence prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Prompt {
    pub fn choice(id: impl Into<String>, features: Vec<f64>, options: Vec<String>) -> Self {
        Self {
            prompt_id: id.into(),
            kind: PromptKind::Choice,
            features,
            options,
            context: Vec::new(),
            label: None,
        }
    }

    pub fn sequence(id: impl Into<String>, context: Vec<u32>) -> Self {
        Self {
            prompt_id: id.into(),
            kind: PromptKind::Sequence,
            features: Vec::new(),
            options: Vec::new(),
            context,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn unlabeled(&self) -> UnlabeledPrompt {
        UnlabeledPrompt(Prompt {
            label: None,
            ..self.clone()
        })
    }

    /// Option index of the label, for choice prompts.
    pub fn label_index(&self) -> Option<usize> {
        let label = self.label.as_ref()?;
        self.options.iter().position(|o| o == label)
    }
}

/// A prompt whose label has been removed. The adaptation loop only accepts
/// this type, so ground truth can never reach the reward path.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPrompt(Prompt);

impl UnlabeledPrompt {
    pub fn prompt(&self) -> &Prompt {
        &self.0
    }
}

impl std::ops::Deref for UnlabeledPrompt {
    type Target = Prompt;
    fn deref(&self) -> &Prompt {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    LinearSoftmax,
    NgramSeq,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Tabular => "tabular",
            PolicyKind::LinearSoftmax => "linear_softmax",
            PolicyKind::NgramSeq => "ngram_seq",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(PolicyKind::Tabular),
            "linear_softmax" => Ok(PolicyKind::LinearSoftmax),
            "ngram_seq" => Ok(PolicyKind::NgramSeq),
            other => Err(Error::Config(format!("unknown policy kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyShape {
    Tabular { k: usize, prompt_ids: Vec<String> },
    LinearSoftmax { d: usize, k: usize },
    NgramSeq { vocab: usize, order: usize, max_len: usize },
}

impl PolicyShape {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyShape::Tabular { .. } => PolicyKind::Tabular,
            PolicyShape::LinearSoftmax { .. } => PolicyKind::LinearSoftmax,
            PolicyShape::NgramSeq { .. } => PolicyKind::NgramSeq,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PolicyShape::Tabular { k, prompt_ids } => k * prompt_ids.len(),
            PolicyShape::LinearSoftmax { d, k } => k * d + k,
            PolicyShape::NgramSeq { vocab, order, .. } => ngram_rows(*vocab, *order) * vocab,
        }
    }
}

fn ngram_rows(vocab: usize, order: usize) -> usize {
    (vocab + 1).pow(order as u32)
}

/// A sampled or scored response in the policy's own action space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Choice(usize),
    /// Generated tokens, ending in [`END_TOKEN`] unless the length cap was hit.
    Sequence(Vec<u32>),
}

impl Action {
    pub fn len(&self) -> usize {
        match self {
            Action::Choice(_) => 1,
            Action::Sequence(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output text of a token sequence: ids joined by single spaces, END dropped.
pub fn tokens_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|t| **t != END_TOKEN)
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub action: Action,
    pub raw: RawResponse,
    /// Log-probability at the sampling temperature.
    pub behavior_logprob: f64,
    pub behavior_token_logprobs: Vec<f64>,
}

/// Where a logit vector comes from, for forward evaluation and backprop.
#[derive(Clone, Copy)]
enum Site<'a> {
    Row(usize),
    Linear(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    shape: PolicyShape,
    theta: Vec<f64>,
    rows: HashMap<String, usize>,
}

/// Frozen copy of a policy, used as the KL reference and as the behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot(Policy);

impl PolicySnapshot {
    pub fn policy(&self) -> &Policy {
        &self.0
    }

    pub fn restore(&self) -> Policy {
        self.0.clone()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        logits.to_vec()
    } else {
        logits.iter().map(|z| z / temperature).collect()
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative total; take the last nonzero entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum();
    kl.max(0.0)
}

impl Policy {
    pub fn new(shape: PolicyShape, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != shape.param_count() {
            return Err(Error::Config(format!(
                "{} policy expects {} parameters, got {}",
                shape.kind(),
                shape.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("policy parameters must be finite".into()));
        }
        let rows = match &shape {
            PolicyShape::Tabular { prompt_ids, .. } => {
                let rows: HashMap<String, usize> = prompt_ids
                    .iter()
                    .enumerate()
                    .map(|(i, id)| (id.clone(), i))
                    .collect();
                if rows.len() != prompt_ids.len() {
                    return Err(Error::Config("duplicate prompt id in tabular policy".into()));
                }
                rows
            }
            _ => HashMap::new(),
        };
        if let PolicyShape::NgramSeq { vocab, max_len, .. } = shape {
            if vocab < 2 || max_len == 0 {
                return Err(Error::Config("ngram policy needs vocab >= 2 and max_len >= 1".into()));
            }
        }
        Ok(Self { shape, theta, rows })
    }

    pub fn zeros(shape: PolicyShape) -> Self {
        let n = shape.param_count();
        Self::new(shape, vec![0.0; n]).expect("zero parameters are valid")
    }

    pub fn tabular(prompt_ids: Vec<String>, k: usize) -> Self {
        Self::zeros(PolicyShape::Tabular { k, prompt_ids })
    }

    pub fn linear(d: usize, k: usize) -> Self {
        Self::zeros(PolicyShape::LinearSoftmax { d, k })
    }

    pub fn ngram(vocab: usize, order: usize, max_len: usize) -> Self {
        Self::zeros(PolicyShape::NgramSeq {
            vocab,
            order,
            max_len,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.shape.kind()
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Replace parameters in place. Used by optimizers; length must not change.
    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Config("parameter length changed".into()));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(self.clone())
    }

    /// Logit row of a tabular prompt, for direct manipulation in tests and generators.
    pub fn row_mut(&mut self, prompt_id: &str) -> Result<&mut [f64]> {
        let k = match &self.shape {
            PolicyShape::Tabular { k, .. } => *k,
            _ => return Err(Error::KindMismatch("row_mut needs a tabular policy".into())),
        };
        let r = *self
            .rows
            .get(prompt_id)
            .ok_or_else(|| Error::UnseenPrompt(prompt_id.to_owned()))?;
        Ok(&mut self.theta[r * k..(r + 1) * k])
    }

    fn width(&self) -> usize {
        match &self.shape {
            PolicyShape::Tabular { k, .. } | PolicyShape::LinearSoftmax { k, .. } => *k,
            PolicyShape::NgramSeq { vocab, .. } => *vocab,
        }
    }

    fn choice_site<'a>(&self, prompt: &'a Prompt) -> Result<Site<'a>> {
        if prompt.kind != PromptKind::Choice {
            return Err(Error::KindMismatch(format!(
                "{} policy cannot score sequence prompt {:?}",
                self.kind(),
                prompt.prompt_id
            )));
        }
        let k = self.width();
        if prompt.options.len() != k {
            return Err(Error::KindMismatch(format!(
                "prompt {:?} has {} options, policy has {k}",
                prompt.prompt_id,
                prompt.options.len()
            )));
        }
        match &self.shape {
            PolicyShape::Tabular { .. } => {
                let r = self
                    .rows
                    .get(&prompt.prompt_id)
                    .ok_or_else(|| Error::UnseenPrompt(prompt.prompt_id.clone()))?;
                Ok(Site::Row(r * k))
            }
            PolicyShape::LinearSoftmax { d, .. } => {
                if prompt.features.len() != *d {
                    return Err(Error::KindMismatch(format!(
                        "prompt {:?} has {} features, policy expects {d}",
                        prompt.prompt_id,
                        prompt.features.len()
                    )));
                }
                Ok(Site::Linear(&prompt.features))
            }
            PolicyShape::NgramSeq { .. } => Err(Error::KindMismatch(
                "ngram_seq policy cannot score choice prompts".into(),
            )),
        }
    }

    fn check_sequence(&self, prompt: &Prompt) -> Result<(usize, usize, usize)> {
        match &self.shape {
            PolicyShape::NgramSeq {
                vocab,
                order,
                max_len,
            } if prompt.kind == PromptKind::Sequence => {
                if let Some(t) = prompt.context.iter().find(|t| **t as usize >= *vocab) {
                    return Err(Error::KindMismatch(format!(
                        "context token {t} outside vocabulary of {vocab}"
                    )));
                }
                Ok((*vocab, *order, *max_len))
            }
            _ => Err(Error::KindMismatch(format!(
                "{} policy cannot score {:?} prompt {:?}",
                self.kind(),
                prompt.kind,
                prompt.prompt_id
            ))),
        }
    }

    fn history_row(&self, context: &[u32], generated: &[u32]) -> usize {
        let (vocab, order) = match &self.shape {
            PolicyShape::NgramSeq { vocab, order, .. } => (*vocab, *order),
            _ => unreachable!("history rows only exist for ngram policies"),
        };
        let bos = vocab as u32;
        let total = context.len() + generated.len();
        let mut idx = 0usize;
        for i in 0..order {
            // i = 0 is the most recent token
            let tok = if i < total {
                let pos = total - 1 - i;
                if pos >= context.len() {
                    generated[pos - context.len()]
                } else {
                    context[pos]
                }
            } else {
                bos
            };
            idx = idx * (vocab + 1) + tok as usize;
        }
        idx * vocab
    }

    fn site_logits(&self, site: Site<'_>) -> Vec<f64> {
        let k = self.width();
        match site {
            Site::Row(off) => self.theta[off..off + k].to_vec(),
            Site::Linear(x) => {
                let d = x.len();
                let (w, b) = self.theta.split_at(k * d);
                (0..k)
                    .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            }
        }
    }

    /// out += scale * (d logits / d theta)^T g
    fn backprop(&self, site: Site<'_>, g: &[f64], scale: f64, out: &mut [f64]) {
        let k = self.width();
        match site {
            Site::Row(off) => {
                for (o, gi) in out[off..off + k].iter_mut().zip(g) {
                    *o += scale * gi;
                }
            }
            Site::Linear(x) => {
                let d = x.len();
                let (w, b) = out.split_at_mut(k * d);
                for c in 0..k {
                    let gc = scale * g[c];
                    if gc == 0.0 {
                        continue;
                    }
                    for (wi, xi) in w[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *wi += gc * xi;
                    }
                    b[c] += gc;
                }
            }
        }
    }

    /// Sites and chosen indices of every decision in `action`.
    fn decisions<'a>(&self, prompt: &'a Prompt, action: &Action) -> Result<Vec<(Site<'a>, usize)>> {
        match action {
            Action::Choice(i) => {
                let site = self.choice_site(prompt)?;
                if *i >= self.width() {
                    return Err(Error::KindMismatch(format!("option index {i} out of range")));
                }
                Ok(vec![(site, *i)])
            }
            Action::Sequence(tokens) => {
                let (vocab, _, max_len) = self.check_sequence(prompt)?;
                if tokens.len() > max_len {
                    return Err(Error::KindMismatch(format!(
                        "sequence of {} tokens exceeds max length {max_len}",
                        tokens.len()
                    )));
                }
                if let Some(pos) = tokens.iter().position(|t| *t == END_TOKEN) {
                    if pos + 1 != tokens.len() {
                        return Err(Error::KindMismatch("END token before end of sequence".into()));
                    }
                }
                tokens
                    .iter()
                    .enumerate()
                    .map(|(t, &tok)| {
                        if tok as usize >= vocab {
                            return Err(Error::KindMismatch(format!(
                                "token {tok} outside vocabulary of {vocab}"
                            )));
                        }
                        Ok((Site::Row(self.history_row(&prompt.context, &tokens[..t])), tok as usize))
                    })
                    .collect()
            }
        }
    }

    /// Logits of a choice prompt, or of the first decoding step of a sequence prompt.
    pub fn action_logits(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        match prompt.kind {
            PromptKind::Choice => Ok(self.site_logits(self.choice_site(prompt)?)),
            PromptKind::Sequence => {
                self.check_sequence(prompt)?;
                Ok(self.site_logits(Site::Row(self.history_row(&prompt.context, &[]))))
            }
        }
    }

    /// Next-token logits of a sequence prompt after `generated`.
    pub fn step_logits(&self, prompt: &Prompt, generated: &[u32]) -> Result<Vec<f64>> {
        self.check_sequence(prompt)?;
        Ok(self.site_logits(Site::Row(self.history_row(&prompt.context, generated))))
    }

    pub fn probs(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        Ok(softmax(&self.action_logits(prompt)?))
    }

    /// Exact entropy (nats) of a choice prompt's answer distribution.
    pub fn choice_entropy(&self, prompt: &Prompt) -> Result<f64> {
        let lp = log_softmax(&self.site_logits(self.choice_site(prompt)?));
        Ok(lp.iter().map(|l| -l.exp() * l).sum::<f64>().max(0.0))
    }

    pub fn action_text(&self, prompt: &Prompt, action: &Action) -> String {
        match action {
            Action::Choice(i) => prompt.options[*i].clone(),
            Action::Sequence(t) => tokens_text(t),
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &Prompt,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Sample> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        match prompt.kind {
            PromptKind::Choice => {
                let logits = self.site_logits(self.choice_site(prompt)?);
                let lp_t = log_softmax(&scaled(&logits, temperature));
                let probs: Vec<f64> = lp_t.iter().map(|l| l.exp()).collect();
                let i = sample_index(&probs, rng);
                let lp1 = log_softmax(&logits)[i];
                Ok(Sample {
                    action: Action::Choice(i),
                    raw: RawResponse {
                        text: prompt.options[i].clone(),
                        tokens: None,
                        token_logprobs: None,
                        total_logprob: lp1,
                    },
                    behavior_logprob: lp_t[i],
                    behavior_token_logprobs: vec![lp_t[i]],
                })
            }
            PromptKind::Sequence => {
                let (_, _, max_len) = self.check_sequence(prompt)?;
                let mut tokens = Vec::new();
                let mut lp1 = Vec::new();
                let mut lpt = Vec::new();
                while tokens.len() < max_len {
                    let logits = self.site_logits(Site::Row(self.history_row(&prompt.context, &tokens)));
                    let lp_t = log_softmax(&scaled(&logits, temperature));
                    let probs: Vec<f64> = lp_t.iter().map(|l| l.exp()).collect();
                    let tok = sample_index(&probs, rng);
                    lp1.push(log_softmax(&logits)[tok]);
                    lpt.push(lp_t[tok]);
                    tokens.push(tok as u32);
                    if tok as u32 == END_TOKEN {
                        break;
                    }
                }
                Ok(Sample {
                    raw: RawResponse {
                        text: tokens_text(&tokens),
                        total_logprob: lp1.iter().sum(),
                        tokens: Some(tokens.clone()),
                        token_logprobs: Some(lp1),
                    },
                    behavior_logprob: lpt.iter().sum(),
                    behavior_token_logprobs: lpt,
                    action: Action::Sequence(tokens),
                })
            }
        }
    }

    /// Argmax decoding, ties to the lowest index at every step.
    pub fn greedy(&self, prompt: &Prompt) -> Result<Action> {
        match prompt.kind {
            PromptKind::Choice => Ok(Action::Choice(argmax(&self.site_logits(self.choice_site(prompt)?)))),
            PromptKind::Sequence => {
                let (_, _, max_len) = self.check_sequence(prompt)?;
                let mut tokens = Vec::new();
                while tokens.len() < max_len {
                    let tok = argmax(&self.site_logits(Site::Row(self.history_row(&prompt.context, &tokens)))) as u32;
                    tokens.push(tok);
                    if tok == END_TOKEN {
                        break;
                    }
                }
                Ok(Action::Sequence(tokens))
            }
        }
    }

    pub fn greedy_answer(&self, prompt: &Prompt, scheme: Scheme) -> Result<CanonicalAnswer> {
        let action = self.greedy(prompt)?;
        let raw = RawResponse::from_text(self.action_text(prompt, &action));
        Ok(crate::canon::canonicalize(&raw, scheme))
    }

    /// Per-decision log-probabilities at `temperature`.
    pub fn token_logprobs(&self, prompt: &Prompt, action: &Action, temperature: f64) -> Result<Vec<f64>> {
        Ok(self
            .decisions(prompt, action)?
            .into_iter()
            .map(|(site, y)| log_softmax(&scaled(&self.site_logits(site), temperature))[y])
            .collect())
    }

    pub fn logprob_at(&self, prompt: &Prompt, action: &Action, temperature: f64) -> Result<f64> {
        Ok(self.token_logprobs(prompt, action, temperature)?.iter().sum())
    }

    /// log pi(y | x) at temperature 1.
    pub fn logprob(&self, prompt: &Prompt, action: &Action) -> Result<f64> {
        self.logprob_at(prompt, action, 1.0)
    }

    /// out += sum_t weights[t] * grad log pi_T(y_t | h_t).
    pub fn accumulate_token_grads(
        &self,
        prompt: &Prompt,
        action: &Action,
        temperature: f64,
        weights: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let decisions = self.decisions(prompt, action)?;
        if weights.len() != decisions.len() {
            return Err(Error::Config(format!(
                "{} token weights for {} decisions",
                weights.len(),
                decisions.len()
            )));
        }
        for ((site, y), w) in decisions.into_iter().zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let p = softmax(&scaled(&self.site_logits(site), temperature));
            let g: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(i, pi)| (if i == y { 1.0 } else { 0.0 } - pi) / temperature)
                .collect();
            self.backprop(site, &g, *w, out);
        }
        Ok(())
    }

    pub fn grad_logprob_at(&self, prompt: &Prompt, action: &Action, temperature: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.theta.len()];
        let ones = vec![1.0; action.len()];
        self.accumulate_token_grads(prompt, action, temperature, &ones, &mut out)?;
        Ok(out)
    }

    pub fn grad_logprob(&self, prompt: &Prompt, action: &Action) -> Result<Vec<f64>> {
        self.grad_logprob_at(prompt, action, 1.0)
    }

    /// KL(self || reference) for one prompt, in nats.
    ///
    /// Choice prompts: exact categorical KL. Sequence prompts: per-step KL summed
    /// along each trajectory in `trajectories`, averaged over trajectories.
    pub fn kl_divergence(
        &self,
        reference: &PolicySnapshot,
        prompt: &Prompt,
        trajectories: &[Action],
    ) -> Result<f64> {
        let reference = reference.policy();
        match prompt.kind {
            PromptKind::Choice => {
                let site = self.choice_site(prompt)?;
                let rsite = reference.choice_site(prompt)?;
                Ok(categorical_kl(&self.site_logits(site), &reference.site_logits(rsite)))
            }
            PromptKind::Sequence => {
                if trajectories.is_empty() {
                    return Ok(0.0);
                }
                let mut total = 0.0;
                for traj in trajectories {
                    for (site, _) in self.decisions(prompt, traj)? {
                        let rlogits = reference.site_logits(site);
                        total += categorical_kl(&self.site_logits(site), &rlogits);
                    }
                }
                Ok(total / trajectories.len() as f64)
            }
        }
    }

    /// out += scale * grad_theta KL(self || reference), contexts held fixed for sequences.
    pub fn accumulate_kl_grad(
        &self,
        reference: &PolicySnapshot,
        prompt: &Prompt,
        trajectories: &[Action],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let reference = reference.policy();
        let mut one = |site: Site<'_>, rsite: Site<'_>, w: f64| {
            let lp = log_softmax(&self.site_logits(site));
            let lq = log_softmax(&reference.site_logits(rsite));
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            let g: Vec<f64> = lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| a.exp() * (a - b - kl))
                .collect();
            self.backprop(site, &g, w, out);
        };
        match prompt.kind {
            PromptKind::Choice => {
                let site = self.choice_site(prompt)?;
                let rsite = reference.choice_site(prompt)?;
                one(site, rsite, scale);
            }
            PromptKind::Sequence => {
                if trajectories.is_empty() {
                    return Ok(());
                }
                let w = scale / trajectories.len() as f64;
                for traj in trajectories {
                    for (site, _) in self.decisions(prompt, traj)? {
                        one(site, site, w);
                    }
                }
            }
        }
        Ok(())
    }
}
