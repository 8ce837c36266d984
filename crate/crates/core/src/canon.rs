//! Canonical answers and empirical response distributions.
//!
//! Two rollouts count as "the same output" when their canonical keys are equal
//! under one [`Scheme`]. Inputs that a scheme cannot parse still map to a key
//! (the [`UNPARSED`] sentinel for multiple choice), so a group never shrinks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNPARSED: &str = "<UNPARSED>";
pub const DEFAULT_ALPHABET: &str = "ABCD";

/// One sampled response.
///
/// `tokens` and `token_logprobs` are only filled for rollouts from a local
/// sequence policy. `total_logprob` is under the temperature-1 policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RawResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub total_logprob: f64,
}

impl RawResponse {
    pub fn from_text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Verbatim,
    TrimCasefold,
    McqLetter,
    Boxed,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Verbatim => "verbatim",
            Scheme::TrimCasefold => "trim-casefold",
            Scheme::McqLetter => "mcq-letter",
            Scheme::Boxed => "boxed",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(Scheme::Verbatim),
            "trim-casefold" => Ok(Scheme::TrimCasefold),
            "mcq-letter" => Ok(Scheme::McqLetter),
            "boxed" => Ok(Scheme::Boxed),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalAnswer {
    pub key: String,
    pub scheme: Scheme,
}

/// A scheme together with the option alphabet used by `mcq-letter`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canonicalizer {
    pub scheme: Scheme,
    alphabet: Vec<char>,
}

impl Canonicalizer {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            alphabet: DEFAULT_ALPHABET.chars().collect(),
        }
    }

    /// Alphabet letters are matched case-insensitively and reported as given.
    pub fn with_alphabet(scheme: Scheme, alphabet: &str) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        if alphabet.is_empty() || alphabet.iter().any(|c| !c.is_alphanumeric()) {
            return Err(Error::Config(format!(
                "option alphabet must be nonempty alphanumeric, got {alphabet:?}"
            )));
        }
        Ok(Self { scheme, alphabet })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn key(&self, text: &str) -> String {
        match self.scheme {
            Scheme::Verbatim => text.to_owned(),
            Scheme::TrimCasefold => trim_casefold(text),
            Scheme::McqLetter => self.mcq_letter(text),
            Scheme::Boxed => {
                let folded = trim_casefold(text);
                match innermost_boxed(&folded) {
                    Some(payload) => trim_casefold(payload),
                    None => folded,
                }
            }
        }
    }

    pub fn canonicalize(&self, raw: &RawResponse) -> CanonicalAnswer {
        CanonicalAnswer {
            key: self.key(&raw.text),
            scheme: self.scheme,
        }
    }

    fn mcq_letter(&self, text: &str) -> String {
        let folded: Vec<char> = trim_casefold(text).chars().collect();
        for (i, &c) in folded.iter().enumerate() {
            let standalone = (i == 0 || !folded[i - 1].is_alphanumeric())
                && folded.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
            if !standalone {
                continue;
            }
            if let Some(&opt) = self.alphabet.iter().find(|a| fold_char(**a) == c) {
                return opt.to_string();
            }
        }
        UNPARSED.to_owned()
    }
}

/// Canonicalize with the default option alphabet.
pub fn canonicalize(raw: &RawResponse, scheme: Scheme) -> CanonicalAnswer {
    Canonicalizer::new(scheme).canonicalize(raw)
}

fn trim_casefold(text: &str) -> String {
    text.trim().to_lowercase()
}

fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Payload of the first `\boxed{..}`, descending into nested boxes.
fn innermost_boxed(text: &str) -> Option<&str> {
    const OPEN: &str = "\\boxed{";
    let start = text.find(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    for (off, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    let payload = &text[start..start + off];
                    return Some(innermost_boxed(payload).unwrap_or(payload));
                }
            }
            _ => {}
        }
    }
    // Unbalanced braces: no well-formed box.
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistEntry {
    pub key: String,
    pub count: usize,
    pub p: f64,
}

/// Unique canonical answers of one rollout group with `p = count / n`.
///
/// Entries are ordered by descending count, ties by ascending key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    entries: Vec<DistEntry>,
    n: usize,
}

impl EmpiricalDistribution {
    pub fn from_keys<S: AsRef<str>>(keys: &[S]) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for k in keys {
            *counts.entry(k.as_ref()).or_default() += 1;
        }
        let n = keys.len();
        let mut entries: Vec<DistEntry> = counts
            .into_iter()
            .map(|(key, count)| DistEntry {
                key: key.to_owned(),
                count,
                p: count as f64 / n as f64,
            })
            .collect();
        // BTreeMap iteration is already key-ascending; a stable sort keeps it for ties.
        entries.sort_by(|a, b| b.count.cmp(&a.count));
        Ok(Self { entries, n })
    }

    pub fn entries(&self) -> &[DistEntry] {
        &self.entries
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn prob(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.p)
    }

    /// Modal entry; ties resolve to the smallest key by construction of the ordering.
    pub fn mode(&self) -> &DistEntry {
        &self.entries[0]
    }
}

pub fn build_distribution(answers: &[CanonicalAnswer]) -> Result<EmpiricalDistribution> {
    if let Some(first) = answers.first() {
        if answers.iter().any(|a| a.scheme != first.scheme) {
            return Err(Error::Config(
                "answers in one group must share a canonicalization scheme".into(),
            ));
        }
    }
    let keys: Vec<&str> = answers.iter().map(|a| a.key.as_str()).collect();
    EmpiricalDistribution::from_keys(&keys)
}
