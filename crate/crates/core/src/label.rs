//! Label externally collected rollouts with rewards and advantages.
//!
//! Input and output are line-delimited JSON, one record per prompt. Output
//! reals are rounded to 9 significant digits before serialization, so a given
//! input and spec always produce the same bytes.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon::{CanonicalAnswer, Canonicalizer, EmpiricalDistribution, RawResponse, Scheme};
use crate::error::{Error, Result};
use crate::grpo::{advantages, AdvantageScope};
use crate::io::round9;
use crate::reward::{entropy, group_rewards, RewardMode, RewardSpec, RewardVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: String,
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, Value>>,
    /// Set by `collect` when every attempt for this prompt failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRolloutRecord {
    pub prompt_id: String,
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, Value>>,
    pub keys: Vec<String>,
    pub p: Vec<f64>,
    pub r1: Vec<f64>,
    pub reward: Vec<f64>,
    pub advantage: Vec<f64>,
    pub entropy: f64,
    pub r2: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub degenerate: bool,
    pub mode: RewardMode,
    pub alpha: f64,
    pub scope: AdvantageScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpec {
    pub reward: RewardSpec,
    pub scope: AdvantageScope,
    pub canonicalizer: Canonicalizer,
    pub std_guard: f64,
}

impl Default for LabelSpec {
    fn default() -> Self {
        Self {
            reward: RewardSpec::default(),
            scope: AdvantageScope::PerGroup,
            canonicalizer: Canonicalizer::new(Scheme::McqLetter),
            std_guard: 1e-8,
        }
    }
}

/// Parse records, skipping blank lines and records carrying an `error`.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<RolloutRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if rec.error.is_some() {
            continue;
        }
        if rec.responses.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "record has no responses".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn label_records(records: &[RolloutRecord], spec: &LabelSpec) -> Result<Vec<LabeledRolloutRecord>> {
    spec.reward.validate()?;
    let mut answers = Vec::with_capacity(records.len());
    let mut rewards: Vec<RewardVector> = Vec::with_capacity(records.len());
    for rec in records {
        let ans: Vec<CanonicalAnswer> = rec
            .responses
            .iter()
            .map(|r| spec.canonicalizer.canonicalize(&RawResponse::from_text(r.as_str())))
            .collect();
        rewards.push(group_rewards(&rec.prompt_id, &ans, &spec.reward)?);
        answers.push(ans);
    }
    let advs = advantages(&rewards, spec.scope, spec.std_guard)?;

    records
        .iter()
        .zip(answers)
        .zip(rewards.iter().zip(advs))
        .map(|((rec, ans), (rv, adv))| {
            let keys: Vec<String> = ans.iter().map(|a| a.key.clone()).collect();
            let dist = EmpiricalDistribution::from_keys(&keys)?;
            let h = entropy(&dist);
            let p: Vec<f64> = keys.iter().map(|k| dist.prob(k).expect("key from this group")).collect();
            Ok(LabeledRolloutRecord {
                prompt_id: rec.prompt_id.clone(),
                responses: rec.responses.clone(),
                metadata: rec.metadata.clone(),
                keys,
                r1: p.iter().copied().map(round9).collect(),
                p: p.into_iter().map(round9).collect(),
                reward: rv.values.iter().copied().map(round9).collect(),
                advantage: adv.values.into_iter().map(round9).collect(),
                entropy: round9(h),
                r2: round9(-h),
                m: dist.m(),
                n: dist.n(),
                degenerate: adv.degenerate,
                mode: spec.reward.mode,
                alpha: round9(spec.reward.alpha),
                scope: spec.scope,
            })
        })
        .collect()
}

/// Full pipeline over file contents: parse, label, serialize with LF endings.
pub fn label_text<R: BufRead>(input: R, spec: &LabelSpec) -> Result<String> {
    let records = read_records(input)?;
    let labeled = label_records(&records, spec)?;
    let mut out = String::new();
    for rec in &labeled {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, responses: &[&str]) -> RolloutRecord {
        RolloutRecord {
            prompt_id: id.into(),
            responses: responses.iter().map(|s| s.to_string()).collect(),
            metadata: None,
            error: None,
        }
    }

    #[test]
    fn worked_example() {
        let out = label_records(&[rec("q1", &["A", "A", "B", "A"])], &LabelSpec::default()).unwrap();
        let r = &out[0];
        assert_eq!(r.r1, vec![0.75, 0.75, 0.25, 0.75]);
        assert_eq!(r.entropy, 0.562335145);
        // standardize [0.75,0.75,0.25,0.75]: mean 0.625, population std 0.2165063509
        assert_eq!(r.advantage, vec![0.577350269, 0.577350269, -1.73205081, 0.577350269]);
        assert_eq!(r.reward, vec![0.328248642, 0.328248642, -0.171751358, 0.328248642]);
        assert_eq!((r.m, r.n, r.degenerate), (2, 4, false));
    }

    #[test]
    fn unanimous_record_is_degenerate() {
        let out = label_records(&[rec("q", &["C", "c", "(C)"])], &LabelSpec::default()).unwrap();
        assert_eq!(out[0].advantage, vec![0.0; 3]);
        assert!(out[0].degenerate);
        assert_eq!(out[0].entropy, 0.0);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let text = "{\"prompt_id\":\"a\",\"responses\":[\"A\"]}\nnot json\n";
        assert!(matches!(read_records(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let text = "\n{\"prompt_id\":\"a\",\"responses\":[]}\n";
        assert!(matches!(read_records(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let text = "{\"prompt_id\":\"a\",\"error\":\"timeout\"}\n{\"prompt_id\":\"b\",\"responses\":[\"B\"]}\n";
        let recs = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].prompt_id, "b");
    }

    #[test]
    fn relabeling_is_idempotent() {
        let input = "{\"prompt_id\":\"a\",\"responses\":[\"A\",\"B\",\"B\"],\"metadata\":{\"z\":1,\"a\":[2]}}\n\
                     {\"prompt_id\":\"b\",\"responses\":[\"D\",\"D\",\"x\",\"D\"]}\n";
        for scope in [AdvantageScope::PerGroup, AdvantageScope::PerBatch] {
            let spec = LabelSpec { scope, ..LabelSpec::default() };
            let once = label_text(input.as_bytes(), &spec).unwrap();
            let twice = label_text(once.as_bytes(), &spec).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn per_batch_treats_file_as_one_batch() {
        let recs = [rec("a", &["A", "B"]), rec("b", &["C", "C"])];
        let spec = LabelSpec { scope: AdvantageScope::PerBatch, ..LabelSpec::default() };
        let out = label_records(&recs, &spec).unwrap();
        // ttrv rewards: a -> 0.5 - 0.75 ln2 each, b -> 1 each; batch std > 0
        assert!(!out[1].degenerate);
        assert!(out[1].advantage[0] > 0.0 && out[0].advantage[0] < 0.0);
        let all: Vec<f64> = out.iter().flat_map(|r| r.advantage.clone()).collect();
        assert!(all.iter().sum::<f64>().abs() < 1e-8);
    }
}
