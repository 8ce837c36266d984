//! File formats: datasets, policy parameters, trajectories, and number formatting.
//!
//! Datasets are line-delimited JSON. The first line is a header
//! `{"d":..,"K":..,"V":..,"scheme":..}`; every following line is one prompt
//! `{prompt_id, kind, features?, options?, context?, label?}`.
//!
//! Policy files are plain text: a `ttrv-policy 1` magic line, `key value`
//! shape lines, then one parameter per line with 17 significant digits.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canon::Scheme;
use crate::engine::StepLog;
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyKind, PolicyShape, Prompt, PromptKind};

/// Round to 9 significant digits. The result's shortest round-trip form has at
/// most 9 digits, which is what `serde_json` (ryu) prints.
pub fn round9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return if v == 0.0 { 0.0 } else { v };
    }
    let r: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "V")]
    pub v: usize,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub prompts: Vec<Prompt>,
}

impl Dataset {
    pub fn from_prompts(prompts: Vec<Prompt>, scheme: Scheme, vocab: usize) -> Self {
        let first_choice = prompts.iter().find(|p| p.kind == PromptKind::Choice);
        let header = DatasetHeader {
            d: first_choice.map_or(0, |p| p.features.len()),
            k: first_choice.map_or(0, |p| p.options.len()),
            v: vocab,
            scheme,
        };
        Self { header, prompts }
    }

    fn validate_prompt(&self, p: &Prompt) -> std::result::Result<(), String> {
        let h = &self.header;
        match p.kind {
            PromptKind::Choice => {
                if p.options.len() < 2 || p.options.len() != h.k {
                    return Err(format!("expected {} options (>= 2), got {}", h.k, p.options.len()));
                }
                if p.features.len() != h.d {
                    return Err(format!("expected {} features, got {}", h.d, p.features.len()));
                }
                if p.features.iter().any(|f| !f.is_finite()) {
                    return Err("non-finite feature".into());
                }
                if let Some(l) = &p.label {
                    if !p.options.contains(l) {
                        return Err(format!("label {l:?} is not an option"));
                    }
                }
            }
            PromptKind::Sequence => {
                if let Some(t) = p.context.iter().find(|t| **t as usize >= h.v) {
                    return Err(format!("context token {t} outside vocabulary {}", h.v));
                }
                if let Some(l) = &p.label {
                    for tok in l.split_whitespace() {
                        match tok.parse::<u32>() {
                            Ok(t) if (t as usize) < h.v && t != crate::policy::END_TOKEN => {}
                            _ => return Err(format!("label token {tok:?} is not a valid token")),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&ds.header)?);
    out.push('\n');
    for p in &ds.prompts {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    parse_dataset(reader)
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: DatasetHeader = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::Parse { line: 1, msg: "missing dataset header".into() });
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        break serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
    };
    let mut ds = Dataset { header, prompts: Vec::new() };
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        ds.validate_prompt(&p).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        if !seen.insert(p.prompt_id.clone()) {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate prompt_id {:?}", p.prompt_id) });
        }
        ds.prompts.push(p);
    }
    Ok(ds)
}

const POLICY_MAGIC: &str = "ttrv-policy 1";

pub fn format_policy(policy: &Policy) -> String {
    let mut s = String::new();
    writeln!(s, "{POLICY_MAGIC}").unwrap();
    writeln!(s, "kind {}", policy.kind()).unwrap();
    match policy.shape() {
        PolicyShape::Tabular { k, prompt_ids } => {
            writeln!(s, "k {k}").unwrap();
            writeln!(s, "rows {}", prompt_ids.len()).unwrap();
            for id in prompt_ids {
                writeln!(s, "row {}", serde_json::to_string(id).unwrap()).unwrap();
            }
        }
        PolicyShape::LinearSoftmax { d, k } => {
            writeln!(s, "d {d}").unwrap();
            writeln!(s, "k {k}").unwrap();
        }
        PolicyShape::NgramSeq { vocab, order, max_len } => {
            writeln!(s, "vocab {vocab}").unwrap();
            writeln!(s, "order {order}").unwrap();
            writeln!(s, "max_len {max_len}").unwrap();
        }
    }
    writeln!(s, "params {}", policy.theta().len()).unwrap();
    for t in policy.theta() {
        writeln!(s, "{t:.16e}").unwrap();
    }
    s
}

pub fn parse_policy(text: &str) -> Result<Policy> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let err = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_owned() };
    match lines.next() {
        Some((_, POLICY_MAGIC)) => {}
        _ => return Err(err(1, "missing policy header")),
    }
    let mut field = |name: &str| -> Result<(usize, String)> {
        let (i, l) = lines.next().ok_or_else(|| err(0, &format!("missing {name}")))?;
        let value = l
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| err(i, &format!("expected `{name} ...`")))?;
        Ok((i, value.to_owned()))
    };
    let usize_field = |f: (usize, String)| -> Result<usize> {
        f.1.parse().map_err(|_| err(f.0, "expected an integer"))
    };
    let (i, kind) = field("kind")?;
    let kind: PolicyKind = kind.parse().map_err(|_| err(i, "unknown policy kind"))?;
    let shape = match kind {
        PolicyKind::Tabular => {
            let k = usize_field(field("k")?)?;
            let rows = usize_field(field("rows")?)?;
            let mut ids = Vec::with_capacity(rows);
            for _ in 0..rows {
                let (i, raw) = field("row")?;
                ids.push(serde_json::from_str(&raw).map_err(|e| err(i, &e.to_string()))?);
            }
            PolicyShape::Tabular { k, prompt_ids: ids }
        }
        PolicyKind::LinearSoftmax => {
            let d = usize_field(field("d")?)?;
            let k = usize_field(field("k")?)?;
            PolicyShape::LinearSoftmax { d, k }
        }
        PolicyKind::NgramSeq => {
            let vocab = usize_field(field("vocab")?)?;
            let order = usize_field(field("order")?)?;
            let max_len = usize_field(field("max_len")?)?;
            PolicyShape::NgramSeq { vocab, order, max_len }
        }
    };
    let n = usize_field(field("params")?)?;
    let mut theta = Vec::with_capacity(n);
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        theta.push(l.trim().parse::<f64>().map_err(|_| err(i, "expected a number"))?);
    }
    if theta.len() != n {
        return Err(err(0, &format!("expected {n} parameters, found {}", theta.len())));
    }
    Policy::new(shape, theta)
}

pub fn write_policy(path: &Path, policy: &Policy) -> Result<()> {
    fs::write(path, format_policy(policy))?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<Policy> {
    parse_policy(&fs::read_to_string(path)?)
}

pub const TRAJECTORY_COLUMNS: [&str; 8] = [
    "step",
    "mean_reward",
    "mean_group_entropy",
    "kl_to_ref",
    "grad_norm",
    "eval_accuracy",
    "degenerate_groups",
    "wall_ms",
];

/// CSV text of a trajectory. Reals use Rust's shortest round-trip formatting.
pub fn format_trajectory_csv(logs: &[StepLog]) -> String {
    let mut s = TRAJECTORY_COLUMNS.join(",");
    s.push('\n');
    for l in logs {
        let acc = l.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            l.step, l.mean_reward, l.mean_group_entropy, l.kl_to_ref, l.grad_norm, acc, l.degenerate_groups, l.wall_ms
        )
        .unwrap();
    }
    s
}

pub fn write_trajectory_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_trajectory_csv(logs).as_bytes())?;
    Ok(())
}
