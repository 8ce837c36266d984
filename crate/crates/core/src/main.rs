use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ttrv::canon::{Canonicalizer, Scheme};
use ttrv::collect::{self, CollectConfig, Collector};
use ttrv::engine::{self, RunStatus, Trajectory};
use ttrv::grpo::{AdaptConfig, AdvantageScope, Objective};
use ttrv::io::{self, Dataset};
use ttrv::label::{self, LabelSpec};
use ttrv::policy::{Prompt, UnlabeledPrompt};
use ttrv::reward::{RewardMode, RewardSpec};
use ttrv::tasks::{self, TaskSpec};
use ttrv::Error;

#[derive(Parser)]
#[command(name = "ttrv", version, about = "Test-time adaptation from self-consistency rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt a base policy on unlabeled prompts and log the trajectory.
    Adapt(AdaptCmd),
    /// Attach rewards and advantages to collected rollouts.
    Label(LabelCmd),
    /// Sample rollouts from a chat-completion endpoint.
    Collect(CollectCmd),
    /// Compare reward modes on a task over paired seeds.
    Ablate(AblateCmd),
    /// Write a generated task to a dataset file.
    Gen(GenCmd),
    /// Greedy accuracy and sampled entropy of a policy on a labeled dataset.
    Eval(EvalCmd),
}

#[derive(Args, Clone)]
struct TaskSource {
    /// Task as `generator:key=value,...` or a JSON task-spec file.
    #[arg(long, env = "TTRV_TASK", conflicts_with = "dataset")]
    task: Option<String>,
    /// Dataset file to adapt on instead of a generated task (requires --policy).
    #[arg(long, env = "TTRV_DATASET", requires = "policy")]
    dataset: Option<PathBuf>,
    /// Base policy file used with --dataset.
    #[arg(long, env = "TTRV_POLICY")]
    policy: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AdaptFlags {
    #[arg(long, env = "TTRV_N_ROLLOUTS", default_value_t = 32)]
    n_rollouts: usize,
    #[arg(long, env = "TTRV_ALPHA", default_value_t = 0.75)]
    alpha: f64,
    #[arg(long, env = "TTRV_TEMPERATURE", default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, env = "TTRV_LR", default_value_t = 0.05)]
    lr: f64,
    #[arg(long, env = "TTRV_STEPS", default_value_t = 100)]
    steps: usize,
    #[arg(long, env = "TTRV_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "TTRV_REWARD_MODE", default_value = "ttrv")]
    reward_mode: RewardMode,
    /// Seed of the `random` reward mode.
    #[arg(long, env = "TTRV_RANDOM_SEED", default_value_t = 0)]
    random_seed: u64,
    #[arg(long, env = "TTRV_ADVANTAGE_SCOPE", default_value = "per_batch")]
    advantage_scope: AdvantageScope,
    #[arg(long, env = "TTRV_OBJECTIVE", default_value = "clipped")]
    objective: Objective,
    #[arg(long, env = "TTRV_CLIP_EPS", default_value_t = 0.2)]
    clip_eps: f64,
    #[arg(long, env = "TTRV_KL_BETA", default_value_t = 0.01)]
    kl_beta: f64,
    #[arg(long, env = "TTRV_BATCH_PROMPTS", default_value_t = 8)]
    batch_prompts: usize,
    #[arg(long, env = "TTRV_INNER_EPOCHS", default_value_t = 1)]
    inner_epochs: usize,
    #[arg(long, env = "TTRV_EVAL_INTERVAL", default_value_t = 5)]
    eval_interval: usize,
    #[arg(long, env = "TTRV_STD_GUARD", default_value_t = 1e-8)]
    std_guard: f64,
    /// Answer canonicalization; defaults to mcq-letter for choice prompts.
    #[arg(long, env = "TTRV_SCHEME")]
    scheme: Option<Scheme>,
    /// Number of prompts adapted on; the rest are held out for evaluation.
    #[arg(long, env = "TTRV_ADAPT_SIZE", default_value_t = 20)]
    adapt_size: usize,
}

impl AdaptFlags {
    fn config(&self) -> AdaptConfig {
        AdaptConfig {
            n_rollouts: self.n_rollouts,
            temperature: self.temperature,
            lr: self.lr,
            kl_beta: self.kl_beta,
            clip_eps: self.clip_eps,
            inner_epochs: self.inner_epochs,
            advantage_scope: self.advantage_scope,
            objective: self.objective,
            std_guard: self.std_guard,
            steps: self.steps,
            batch_prompts: self.batch_prompts,
            eval_interval: self.eval_interval,
            scheme: self.scheme,
            seed: self.seed,
            reward: RewardSpec { mode: self.reward_mode, alpha: self.alpha, random_seed: self.random_seed },
        }
    }
}

#[derive(Args)]
struct AdaptCmd {
    #[command(flatten)]
    source: TaskSource,
    #[command(flatten)]
    flags: AdaptFlags,
    /// Output directory for trajectory.csv, summary.json and policy.txt.
    #[arg(long, env = "TTRV_OUT")]
    out: PathBuf,
    /// Record wall-clock milliseconds in trajectory.csv (otherwise 0, for reproducible files).
    #[arg(long, env = "TTRV_TIMING")]
    timing: bool,
}

#[derive(Args)]
struct LabelCmd {
    /// Rollout file, one record per line.
    #[arg(long, env = "TTRV_INPUT")]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long, env = "TTRV_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long, env = "TTRV_REWARD_MODE", default_value = "ttrv")]
    reward_mode: RewardMode,
    #[arg(long, env = "TTRV_ALPHA", default_value_t = 0.75)]
    alpha: f64,
    #[arg(long, env = "TTRV_RANDOM_SEED", default_value_t = 0)]
    random_seed: u64,
    #[arg(long, env = "TTRV_ADVANTAGE_SCOPE", default_value = "per_group")]
    advantage_scope: AdvantageScope,
    #[arg(long, env = "TTRV_SCHEME", default_value = "mcq-letter")]
    scheme: Scheme,
    /// Restrict mcq-letter answers to these letters.
    #[arg(long, env = "TTRV_ALPHABET")]
    alphabet: Option<String>,
    #[arg(long, env = "TTRV_STD_GUARD", default_value_t = 1e-8)]
    std_guard: f64,
}

#[derive(Args)]
struct CollectCmd {
    /// Prompts file with `{prompt_id, text}` per line.
    #[arg(long, env = "TTRV_PROMPTS")]
    prompts: PathBuf,
    #[arg(long, env = "TTRV_OUTPUT")]
    output: PathBuf,
    /// Endpoint base URL; requests go to `<base-url>/chat/completions`.
    #[arg(long, env = "TTRV_BASE_URL")]
    base_url: String,
    #[arg(long, env = "TTRV_MODEL")]
    model: String,
    #[arg(long, env = "TTRV_N", default_value_t = 32)]
    n: usize,
    #[arg(long, env = "TTRV_TEMPERATURE", default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, env = "TTRV_MAX_TOKENS")]
    max_tokens: Option<u32>,
    /// Sent as a bearer token.
    #[arg(long, env = "TTRV_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    /// One request per sample instead of a single n-sample request.
    #[arg(long, env = "TTRV_PER_REQUEST")]
    per_request: bool,
    #[arg(long, env = "TTRV_ATTEMPTS", default_value_t = 3)]
    attempts: u32,
    #[arg(long, env = "TTRV_BACKOFF_MS", default_value_t = 500)]
    backoff_ms: u64,
    #[arg(long, env = "TTRV_TIMEOUT_SECS", default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long, env = "TTRV_TASK")]
    task: String,
    #[command(flatten)]
    flags: AdaptFlags,
    /// Reward modes to compare.
    #[arg(long, env = "TTRV_MODES", value_delimiter = ',', default_value = "ttrv,freq_only,entropy_only,majority,random")]
    modes: Vec<RewardMode>,
    #[arg(long, env = "TTRV_SEEDS", value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// CSV output; stdout when omitted.
    #[arg(long, env = "TTRV_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenCmd {
    #[arg(long, env = "TTRV_TASK")]
    task: String,
    /// Dataset file to write.
    #[arg(long, env = "TTRV_OUT")]
    out: PathBuf,
    /// Also write the base policy here.
    #[arg(long, env = "TTRV_POLICY_OUT")]
    policy_out: Option<PathBuf>,
    /// Also write the shifted evaluation set (cross_distribution) here.
    #[arg(long, env = "TTRV_SHIFTED_OUT")]
    shifted_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long, env = "TTRV_POLICY")]
    policy: PathBuf,
    #[arg(long, env = "TTRV_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "TTRV_N_ROLLOUTS", default_value_t = 32)]
    n_rollouts: usize,
    #[arg(long, env = "TTRV_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_task(s: &str) -> anyhow::Result<TaskSpec> {
    let path = Path::new(s);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {s}"))?;
        let spec: TaskSpec = serde_json::from_str(&text).with_context(|| format!("parsing task spec {s}"))?;
        spec.validate()?;
        return Ok(spec);
    }
    Ok(TaskSpec::parse_inline(s)?)
}

struct Loaded {
    base: ttrv::policy::Policy,
    adapt: Vec<Prompt>,
    eval: Vec<Prompt>,
    task: Option<TaskSpec>,
}

fn load_source(src: &TaskSource, adapt_size: usize) -> anyhow::Result<Loaded> {
    if let Some(ds_path) = &src.dataset {
        let ds = tasks::load_dataset(ds_path)?;
        let base = io::read_policy(src.policy.as_ref().expect("required by clap"))?;
        if adapt_size == 0 || adapt_size > ds.prompts.len() {
            bail!("adapt size {adapt_size} outside 1..={}", ds.prompts.len());
        }
        let (adapt, rest) = ds.prompts.split_at(adapt_size);
        let eval = rest.iter().filter(|p| p.label.is_some()).cloned().collect();
        return Ok(Loaded { base, adapt: adapt.to_vec(), eval, task: None });
    }
    let spec = parse_task(src.task.as_deref().unwrap_or("latent_knowledge"))?;
    let data = tasks::generate(&spec)?;
    let (adapt, eval) = data.split(adapt_size)?;
    Ok(Loaded { base: data.base, adapt, eval, task: Some(spec) })
}

fn summary(traj: &Trajectory, task: Option<&TaskSpec>, adapt_size: usize) -> serde_json::Value {
    let (status, divergence) = match &traj.status {
        RunStatus::Completed => ("completed", None),
        RunStatus::Diverged(m) => ("diverged", Some(m)),
    };
    json!({
        "status": status,
        "divergence": divergence,
        "seed": traj.seed,
        "adapt_size": adapt_size,
        "steps_logged": traj.logs.len(),
        "config": traj.config,
        "task": task,
        "initial_eval": traj.initial_eval(),
        "final_eval": traj.final_eval(),
        "evals": traj.evals,
    })
}

fn cmd_adapt(cmd: AdaptCmd) -> anyhow::Result<ExitCode> {
    let config = cmd.flags.config();
    config.validate()?;
    let loaded = load_source(&cmd.source, cmd.flags.adapt_size)?;
    let adapt_set: Vec<UnlabeledPrompt> = loaded.adapt.iter().map(Prompt::unlabeled).collect();
    let eval = (!loaded.eval.is_empty()).then_some(loaded.eval.as_slice());
    let mut traj = engine::adapt(&loaded.base, &adapt_set, &config, eval)?;
    if !cmd.timing {
        traj.logs.iter_mut().for_each(|l| l.wall_ms = 0);
    }

    fs::create_dir_all(&cmd.out).with_context(|| format!("creating {}", cmd.out.display()))?;
    io::write_trajectory_csv(&cmd.out.join("trajectory.csv"), &traj.logs)?;
    io::write_policy(&cmd.out.join("policy.txt"), &traj.final_policy)?;
    let s = summary(&traj, loaded.task.as_ref(), cmd.flags.adapt_size);
    fs::write(cmd.out.join("summary.json"), serde_json::to_string_pretty(&s)? + "\n")?;

    if let (Some(a), Some(b)) = (traj.initial_eval(), traj.final_eval()) {
        eprintln!("accuracy {:.4} -> {:.4}", a.accuracy, b.accuracy);
    }
    match traj.status {
        RunStatus::Completed => Ok(ExitCode::SUCCESS),
        RunStatus::Diverged(m) => {
            eprintln!("diverged: {m}");
            Ok(ExitCode::from(2))
        }
    }
}

fn cmd_label(cmd: LabelCmd) -> anyhow::Result<ExitCode> {
    let canonicalizer = match &cmd.alphabet {
        Some(a) => Canonicalizer::with_alphabet(cmd.scheme, a)?,
        None => Canonicalizer::new(cmd.scheme),
    };
    let spec = LabelSpec {
        reward: RewardSpec { mode: cmd.reward_mode, alpha: cmd.alpha, random_seed: cmd.random_seed },
        scope: cmd.advantage_scope,
        canonicalizer,
        std_guard: cmd.std_guard,
    };
    let file = fs::File::open(&cmd.input).with_context(|| format!("opening {}", cmd.input.display()))?;
    let text = label::label_text(BufReader::new(file), &spec)
        .with_context(|| format!("labeling {}", cmd.input.display()))?;
    match &cmd.output {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_collect(cmd: CollectCmd) -> anyhow::Result<ExitCode> {
    let file = fs::File::open(&cmd.prompts).with_context(|| format!("opening {}", cmd.prompts.display()))?;
    let prompts = collect::read_prompts(BufReader::new(file))?;
    let collector = Collector::new(CollectConfig {
        base_url: cmd.base_url,
        model: cmd.model,
        n: cmd.n,
        temperature: cmd.temperature,
        max_tokens: cmd.max_tokens,
        api_key: cmd.api_key,
        per_request: cmd.per_request,
        attempts: cmd.attempts,
        backoff_base: Duration::from_millis(cmd.backoff_ms),
        timeout: Duration::from_secs(cmd.timeout_secs),
    })?;
    let records = collector.collect(&prompts);
    fs::write(&cmd.output, collect::records_text(&records)?)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} prompts failed", records.len());
    }
    if !records.is_empty() && failed == records.len() {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(cmd: AblateCmd) -> anyhow::Result<ExitCode> {
    let task = parse_task(&cmd.task)?;
    let config = cmd.flags.config();
    let specs: Vec<RewardSpec> = cmd
        .modes
        .iter()
        .map(|&mode| RewardSpec { mode, alpha: cmd.flags.alpha, random_seed: cmd.flags.random_seed })
        .collect();
    let table = engine::run_ablation_suite(&task, &specs, &config, &cmd.seeds, cmd.flags.adapt_size)?;
    let csv = table.to_csv();
    match &cmd.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(cmd: GenCmd) -> anyhow::Result<ExitCode> {
    let spec = parse_task(&cmd.task)?;
    let data = tasks::generate(&spec)?;
    io::write_dataset(&cmd.out, &Dataset::from_prompts(data.prompts, data.scheme, 0))?;
    if let Some(p) = &cmd.policy_out {
        io::write_policy(p, &data.base)?;
    }
    if let Some(p) = &cmd.shifted_out {
        let Some(shifted) = data.shifted else {
            bail!("generator {} has no shifted evaluation set", spec.generator);
        };
        io::write_dataset(p, &Dataset::from_prompts(shifted, data.scheme, 0))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cmd: EvalCmd) -> anyhow::Result<ExitCode> {
    let policy = io::read_policy(&cmd.policy)?;
    let ds = tasks::load_dataset(&cmd.dataset)?;
    let labeled: Vec<Prompt> = ds.prompts.into_iter().filter(|p| p.label.is_some()).collect();
    let r = engine::evaluate(&policy, &labeled, cmd.n_rollouts, Some(ds.header.scheme), cmd.seed, 0)?;
    println!("{}", serde_json::to_string(&r)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Adapt(c) => cmd_adapt(c),
        Command::Label(c) => cmd_label(c),
        Command::Collect(c) => cmd_collect(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Gen(c) => cmd_gen(c),
        Command::Eval(c) => cmd_eval(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::Divergence(_)) = e.downcast_ref::<Error>() {
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
