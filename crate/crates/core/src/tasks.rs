//! Synthetic tasks with known ground truth.
//!
//! * `latent_knowledge`: a linear-softmax base policy `tau W* + sigma N` whose
//!   argmax mostly agrees with the hidden labeler `argmax W* x` while its
//!   sampling distribution stays flat.
//! * `adversarial_majority`: tabular prompts where a fraction have a distractor
//!   as the modal answer (0.40) just ahead of the correct one (0.35).
//! * `cross_distribution`: two feature distributions sharing `W*`.
//! * `biased_classes`: an adaptation subset drawn only from some classes.
//!
//! `W*` has orthonormal rows `u_1..u_K`. Features are `margin * u_c + z` with
//! `z ~ N(0, I)`; the cluster `c` cycles through a fresh permutation of the
//! classes every `K` prompts, so any prefix is close to class-balanced.
//! `margin = 0` gives plain standard-normal features. The base-policy noise
//! `N` has i.i.d. `N(0, 1/(K d))` entries, i.e. unit expected Frobenius norm.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::canon::Scheme;
use crate::error::{Error, Result};
use crate::policy::{argmax, Policy, PolicyShape, Prompt};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    LatentKnowledge,
    AdversarialMajority,
    CrossDistribution,
    BiasedClasses,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::LatentKnowledge => "latent_knowledge",
            Generator::AdversarialMajority => "adversarial_majority",
            Generator::CrossDistribution => "cross_distribution",
            Generator::BiasedClasses => "biased_classes",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Generator::LatentKnowledge,
            Generator::AdversarialMajority,
            Generator::CrossDistribution,
            Generator::BiasedClasses,
        ]
        .into_iter()
        .find(|g| g.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown generator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub generator: Generator,
    pub n_prompts: usize,
    pub d: usize,
    pub k: usize,
    /// Attenuation of the true weights in the base policy, in (0, 1].
    pub tau: f64,
    /// Scale of the weight noise added to the base policy.
    pub sigma: f64,
    /// Class-cluster separation of the features.
    pub margin: f64,
    pub modal_wrong_fraction: f64,
    /// Additive feature shift of distribution B; `None` shifts every coordinate by 0.5.
    pub shift: Option<Vec<f64>>,
    /// Multiplicative feature scale of distribution B.
    pub rescale: f64,
    pub class_subset: Vec<usize>,
    /// Size of the class-restricted adaptation subset (`biased_classes`).
    pub adapt_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            generator: Generator::LatentKnowledge,
            n_prompts: 200,
            d: 16,
            k: 4,
            tau: 0.35,
            sigma: 0.8,
            margin: 5.5,
            modal_wrong_fraction: 0.3,
            shift: None,
            rescale: 1.25,
            class_subset: vec![0],
            adapt_size: 20,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// The frozen reference configuration: latent_knowledge, seed 0, n=200, d=16, K=4, tau=0.35, sigma=0.8.
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_prompts == 0 {
            return bad("n_prompts must be positive".into());
        }
        if !(2..=26).contains(&self.k) {
            return bad(format!("k must be in 2..=26, got {}", self.k));
        }
        if self.d == 0 && self.generator != Generator::AdversarialMajority {
            return bad("d must be positive".into());
        }
        if self.generator != Generator::AdversarialMajority && self.d < self.k {
            return bad(format!("d = {} must be at least k = {}", self.d, self.k));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        if !(0.0..=1.0).contains(&self.modal_wrong_fraction) {
            return bad("modal_wrong_fraction must be in [0, 1]".into());
        }
        if self.generator == Generator::AdversarialMajority && self.k < 3 {
            return bad("adversarial_majority needs k >= 3".into());
        }
        if let Some(shift) = &self.shift {
            if shift.len() != self.d {
                return bad(format!("shift has {} entries, d = {}", shift.len(), self.d));
            }
        }
        if !(self.rescale > 0.0 && self.rescale.is_finite()) {
            return bad("rescale must be > 0".into());
        }
        if self.class_subset.is_empty() || self.class_subset.iter().any(|c| *c >= self.k) {
            return bad("class_subset must be nonempty option indices".into());
        }
        Ok(())
    }

    /// Parse `generator:key=value,key=value`; unknown keys are errors.
    pub fn parse_inline(s: &str) -> Result<Self> {
        let (gen, params) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = TaskSpec {
            generator: gen.parse()?,
            ..TaskSpec::default()
        };
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        };
        let int = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        };
        for kv in params.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
            match k.trim() {
                "n" | "n_prompts" => spec.n_prompts = int(k, v)?,
                "d" => spec.d = int(k, v)?,
                "k" | "K" => spec.k = int(k, v)?,
                "tau" => spec.tau = num(k, v)?,
                "sigma" => spec.sigma = num(k, v)?,
                "margin" => spec.margin = num(k, v)?,
                "modal_wrong_fraction" | "wrong" => spec.modal_wrong_fraction = num(k, v)?,
                "rescale" => spec.rescale = num(k, v)?,
                "shift" => {
                    let s = num(k, v)?;
                    spec.shift = Some(vec![s; spec.d]);
                }
                "class_subset" | "classes" => {
                    spec.class_subset = v
                        .split('+')
                        .map(|c| int(k, c))
                        .collect::<Result<Vec<_>>>()?
                }
                "adapt_size" => spec.adapt_size = int(k, v)?,
                "seed" => {
                    spec.seed = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed {v:?}")))?
                }
                other => return Err(Error::Config(format!("unknown task parameter {other:?}"))),
            }
        }
        if let Some(shift) = &mut spec.shift {
            // `shift=` may precede `d=`
            let s = shift[0];
            *shift = vec![s; spec.d];
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything a run needs from a task.
#[derive(Debug, Clone)]
pub struct TaskData {
    /// Prompts the adaptation subset is taken from (the first `adapt_size`).
    pub prompts: Vec<Prompt>,
    /// Separate evaluation distribution (cross_distribution B).
    pub shifted: Option<Vec<Prompt>>,
    pub base: Policy,
    pub oracle: Option<Policy>,
    pub scheme: Scheme,
    /// Test-time setting where the adapted prompts are also the evaluated ones.
    pub eval_on_adapted: bool,
}

impl TaskData {
    /// (adaptation prompts, evaluation prompts).
    pub fn split(&self, adapt_size: usize) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
        if adapt_size == 0 || adapt_size > self.prompts.len() {
            return Err(Error::Config(format!(
                "adapt size {adapt_size} outside 1..={}",
                self.prompts.len()
            )));
        }
        let adapt = self.prompts[..adapt_size].to_vec();
        let eval = if let Some(b) = &self.shifted {
            b.clone()
        } else if self.eval_on_adapted {
            adapt.clone()
        } else {
            self.prompts[adapt_size..].to_vec()
        };
        Ok((adapt, eval))
    }
}

pub fn option_keys(k: usize) -> Vec<String> {
    (0..k).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

struct LinearWorld {
    w_star: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

impl LinearWorld {
    fn new(spec: &TaskSpec) -> Self {
        let (d, k) = (spec.d, spec.k);
        let mut rng = rng::substream(spec.seed, &[rng::TAG_TASK, 0]);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        while rows.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Self { w_star: rows.concat(), centroids: rows }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.w_star
            .chunks(d)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn draw(&self, spec: &TaskSpec, c: usize, rng: &mut Stream, shift: Option<(&[f64], f64)>) -> (Vec<f64>, usize) {
        let mut x: Vec<f64> = self.centroids[c]
            .iter()
            .map(|u| spec.margin * u + normal(rng))
            .collect();
        if let Some((s, scale)) = shift {
            for (xi, si) in x.iter_mut().zip(s) {
                *xi = *xi * scale + si;
            }
        }
        let label = argmax(&self.logits(&x));
        (x, label)
    }

    fn prompts(&self, spec: &TaskSpec, stream: u64, prefix: &str, shift: Option<(&[f64], f64)>) -> Vec<Prompt> {
        let mut rng = rng::substream(spec.seed, &[rng::TAG_TASK, stream]);
        let options = option_keys(spec.k);
        let mut block: Vec<usize> = Vec::new();
        (0..spec.n_prompts)
            .map(|i| {
                if block.is_empty() {
                    block = (0..spec.k).collect();
                    block.shuffle(&mut rng);
                }
                let c = block.pop().expect("refilled");
                let (x, label) = self.draw(spec, c, &mut rng, shift);
                Prompt::choice(format!("{prefix}-{i:04}"), x, options.clone())
                    .with_label(options[label].clone())
            })
            .collect()
    }

    fn oracle(&self, spec: &TaskSpec) -> Policy {
        let mut theta = self.w_star.clone();
        theta.extend(std::iter::repeat_n(0.0, spec.k));
        Policy::new(PolicyShape::LinearSoftmax { d: spec.d, k: spec.k }, theta).expect("oracle shape")
    }

    fn base(&self, spec: &TaskSpec) -> Policy {
        let mut rng = rng::substream(spec.seed, &[rng::TAG_TASK, 1]);
        let scale = 1.0 / ((spec.k * spec.d) as f64).sqrt();
        let mut theta: Vec<f64> = self
            .w_star
            .iter()
            .map(|w| spec.tau * w + spec.sigma * normal(&mut rng) * scale)
            .collect();
        theta.extend(std::iter::repeat_n(0.0, spec.k));
        Policy::new(PolicyShape::LinearSoftmax { d: spec.d, k: spec.k }, theta).expect("base shape")
    }
}

/// Labeled dataset plus the base policy, and the oracle `W*` policy.
pub fn gen_latent_knowledge(spec: &TaskSpec) -> Result<(Vec<Prompt>, Policy, Policy)> {
    spec.validate()?;
    let world = LinearWorld::new(spec);
    Ok((world.prompts(spec, 2, "lk", None), world.base(spec), world.oracle(spec)))
}

/// Tabular task. Mode-wrong prompts have distractor 0.40, correct 0.35; the
/// rest swap the two. The remaining 0.25 is spread over the other options.
pub fn gen_adversarial_majority(spec: &TaskSpec) -> Result<(Vec<Prompt>, Policy)> {
    spec.validate()?;
    let k = spec.k;
    let mut rng = rng::substream(spec.seed, &[rng::TAG_TASK, 3]);
    let options = option_keys(k);
    let n = spec.n_prompts;
    let n_wrong = (spec.modal_wrong_fraction * n as f64).round() as usize;
    let mut wrong_flags: Vec<bool> = (0..n).map(|i| i < n_wrong).collect();
    wrong_flags.shuffle(&mut rng);

    let ids: Vec<String> = (0..n).map(|i| format!("am-{i:04}")).collect();
    let mut policy = Policy::tabular(ids.clone(), k);
    let mut prompts = Vec::with_capacity(n);
    let rest = 0.25 / (k - 2) as f64;
    for (id, wrong) in ids.iter().zip(wrong_flags) {
        let correct = rng.random_range(0..k);
        let distractor = (correct + rng.random_range(1..k)) % k;
        let mut probs = vec![rest; k];
        let (top, second) = if wrong { (distractor, correct) } else { (correct, distractor) };
        probs[top] = 0.40;
        probs[second] = 0.35;
        for (t, p) in policy.row_mut(id)?.iter_mut().zip(&probs) {
            *t = p.ln();
        }
        prompts.push(Prompt::choice(id.clone(), Vec::new(), options.clone()).with_label(options[correct].clone()));
    }
    Ok((prompts, policy))
}

/// (distribution A, distribution B, base policy). B's features are `rescale * x + shift`.
pub fn gen_cross_distribution(spec: &TaskSpec) -> Result<(Vec<Prompt>, Vec<Prompt>, Policy)> {
    spec.validate()?;
    let world = LinearWorld::new(spec);
    let shift = spec.shift.clone().unwrap_or_else(|| vec![0.5; spec.d]);
    let a = world.prompts(spec, 2, "xa", None);
    let b = world.prompts(spec, 4, "xb", Some((&shift, spec.rescale)));
    Ok((a, b, world.base(spec)))
}

/// Dataset whose first `adapt_size` prompts have labels in `class_subset`;
/// the remaining prompts cover all classes and serve as the held-out set.
pub fn gen_biased_classes(spec: &TaskSpec) -> Result<(Vec<Prompt>, Policy)> {
    spec.validate()?;
    let world = LinearWorld::new(spec);
    let pool = world.prompts(spec, 2, "bc", None);
    let in_subset = |p: &Prompt| {
        p.label_index()
            .is_some_and(|l| spec.class_subset.contains(&l))
    };
    let (mut chosen, mut rest) = (Vec::new(), Vec::new());
    for p in pool {
        if chosen.len() < spec.adapt_size && in_subset(&p) {
            chosen.push(p);
        } else {
            rest.push(p);
        }
    }
    if chosen.len() < spec.adapt_size {
        return Err(Error::Config(format!(
            "only {} prompts fall in class subset {:?}, need {}",
            chosen.len(),
            spec.class_subset,
            spec.adapt_size
        )));
    }
    chosen.extend(rest);
    Ok((chosen, world.base(spec)))
}

pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    let scheme = Scheme::McqLetter;
    Ok(match spec.generator {
        Generator::LatentKnowledge => {
            let (prompts, base, oracle) = gen_latent_knowledge(spec)?;
            TaskData { prompts, shifted: None, base, oracle: Some(oracle), scheme, eval_on_adapted: false }
        }
        Generator::AdversarialMajority => {
            let (prompts, base) = gen_adversarial_majority(spec)?;
            TaskData { prompts, shifted: None, base, oracle: None, scheme, eval_on_adapted: true }
        }
        Generator::CrossDistribution => {
            let (a, b, base) = gen_cross_distribution(spec)?;
            TaskData { prompts: a, shifted: Some(b), base, oracle: None, scheme, eval_on_adapted: false }
        }
        Generator::BiasedClasses => {
            let (prompts, base) = gen_biased_classes(spec)?;
            TaskData { prompts, shifted: None, base, oracle: None, scheme, eval_on_adapted: false }
        }
    })
}

pub fn load_dataset(path: &Path) -> Result<crate::io::Dataset> {
    crate::io::read_dataset(path)
}
