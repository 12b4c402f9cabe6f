use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use abacus_rl::abacus::Action;
use abacus_rl::config::{Overrides, RunConfig};
use abacus_rl::env::{step_traced, AbacusEnv, EpisodeConfig, Operation, RewardConfig, RewardPreset, Task};
use abacus_rl::eval::{
    error_report, evaluate_accuracy, ood_sweep, to_base5, write_error_artifacts, write_ood_csv, NetPolicy, OODConfig, OraclePolicy, Policy,
    RandomPolicy,
};
use abacus_rl::net::{load_checkpoint, ArchPreset};
use abacus_rl::oracle::run_oracle_episode;
use abacus_rl::ppo::{train, TrainIo, FINAL_CHECKPOINT};
use abacus_rl::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "abacus-rl",
    version,
    about = "Train and evaluate an agent that does base-5 arithmetic on a virtual abacus"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Length-generalization sweep and error report.
    Eval(EvalArgs),
    /// Check the scripted solver against big-integer arithmetic.
    Oracle(OracleArgs),
    /// Replay a policy on explicit operations.
    Trace(TraceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Dense,
    NoOf,
    NoOfSp,
}

impl From<PresetArg> for RewardPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Dense => RewardPreset::Dense,
            PresetArg::NoOf => RewardPreset::NoOf,
            PresetArg::NoOfSp => RewardPreset::NoOfSp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Add,
    Sub,
    Both,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Add => Task::AddOnly,
            TaskArg::Sub => Task::SubOnly,
            TaskArg::Both => Task::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Net,
    Oracle,
    Random,
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    columns: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            preset: self.preset.map(Into::into),
            columns: self.columns,
            task: self.task.map(Into::into),
            ..Overrides::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    n_envs: Option<usize>,
    #[arg(long)]
    rollout_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    cycles: Option<u32>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "net")]
    policy: PolicyArg,
    /// Interval exponents, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    x: Vec<u32>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Sample actions instead of taking the most probable one.
    #[arg(long)]
    sample: bool,
    /// Also measure accuracy on this many operations of the training task.
    #[arg(long, default_value_t = 0)]
    accuracy_ops: u64,
    /// Trace files to keep.
    #[arg(long, default_value_t = 20)]
    traces: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1000)]
    episodes: u64,
    /// Operations per episode.
    #[arg(long, default_value_t = 20)]
    max_ops: u64,
    /// Write every step as JSON lines.
    #[arg(long)]
    emit: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    common: Common,
    /// Operations in base 5, e.g. "+1234,-402". The first must be an addition.
    #[arg(long, allow_hyphen_values = true)]
    ops: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "net")]
    policy: PolicyArg,
    /// Write the per-step trace here instead of stdout.
    #[arg(long)]
    emit: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Oracle(a) => cmd_oracle(a),
        Cmd::Trace(a) => cmd_trace(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ABACUS_RL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("ABACUS_RL_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut o = a.common.overrides();
    o.arch = a.arch.map(|x| match x {
        ArchArg::Paper => ArchPreset::Paper,
        ArchArg::Desk => ArchPreset::Desk,
    });
    o.min_len = a.min_len;
    o.max_len = a.max_len;
    o.total_steps = a.total_steps;
    o.n_envs = a.n_envs;
    o.rollout_len = a.rollout_len;
    o.epochs = a.epochs;
    o.lr0 = a.lr0;
    o.cycles = a.cycles;
    o.checkpoint_every = a.checkpoint_every;
    let run = RunConfig::resolve(a.common.config.as_deref(), &o)?;
    run.validate()?;
    fs::create_dir_all(&run.out)?;
    fs::write(
        run.out.join("config.toml"),
        toml::to_string(&run).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || {
            eprintln!("interrupt: finishing the current epoch and writing a checkpoint");
            stop.store(true, Ordering::SeqCst);
        })
        .map_err(|e| Error::Config(e.to_string()))?;
    }

    let cfg = run.train_config();
    let io = TrainIo {
        out_dir: Some(run.out.clone()),
        resume: a.resume,
    };
    let outcome = train(&cfg, &io, Some(&stop), |_| {})?;
    let last = outcome.metrics.last();
    let summary = serde_json::json!({
        "epochs": outcome.state.epoch,
        "env_steps": outcome.state.env_steps,
        "max_consec_ops": outcome.state.max_consec_ops,
        "final_accuracy": last.map(|m| m.accuracy),
        "final_mean_reward": last.map(|m| m.mean_reward),
        "interrupted": outcome.interrupted,
        "checkpoint": if outcome.interrupted { "interrupted.ckpt" } else { FINAL_CHECKPOINT },
    });
    fs::write(run.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if outcome.interrupted {
        ExitCode::from(130)
    } else {
        ExitCode::SUCCESS
    })
}

/// The policy plus, for a checkpoint, the episode settings it was trained on.
fn make_policy(kind: PolicyArg, ckpt: Option<&Path>, greedy: bool, seed: u64) -> Result<(Box<dyn Policy>, Option<EpisodeConfig>)> {
    Ok(match kind {
        PolicyArg::Oracle => (Box::new(OraclePolicy), None),
        PolicyArg::Random => (Box::new(RandomPolicy::new(seed)), None),
        PolicyArg::Net => {
            let path = ckpt.ok_or_else(|| Error::Config("--ckpt is required for the net policy".into()))?;
            let path = if path.is_dir() {
                path.join(FINAL_CHECKPOINT)
            } else {
                path.to_path_buf()
            };
            let ck = load_checkpoint(&path)?;
            let trained = serde_json::from_value(ck.metadata["config"]["episode"].clone()).ok();
            (Box::new(NetPolicy::new(Arc::new(ck.params), greedy, seed)), trained)
        }
    })
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let mut o = a.common.overrides();
    if o.out.is_none() {
        o.out = Some(PathBuf::from("eval"));
    }
    let columns = a.common.columns.unwrap_or(20);
    let run = RunConfig::resolve(a.common.config.as_deref(), &o)?;
    let ood = OODConfig {
        xs: a.x.clone(),
        samples: a.samples,
        columns,
        greedy: !a.sample,
        seed: run.seed,
    };
    ood.validate()?;
    let (mut policy, trained) = make_policy(a.policy, a.ckpt.as_deref(), ood.greedy, run.seed)?;
    fs::create_dir_all(&run.out)?;

    let mut report = serde_json::Map::new();
    if a.accuracy_ops > 0 {
        // Accuracy is measured on the training task unless a config file
        // says otherwise.
        let episode = match (trained, a.common.config.is_some()) {
            (Some(t), false) => EpisodeConfig { seed: run.seed, ..t },
            _ => run.episode_config(),
        };
        let acc = evaluate_accuracy(policy.as_mut(), &episode, a.accuracy_ops)?;
        println!(
            "accuracy {:.4} over {} operations ({} episodes)",
            acc.accuracy, acc.attempted, acc.episodes
        );
        report.insert("accuracy".into(), serde_json::to_value(&acc)?);
    }

    let res = ood_sweep(policy.as_mut(), &ood)?;
    write_ood_csv(&run.out.join("ood.csv"), &res.rows)?;
    println!("{:>3} {:>8} {:>8} {:>10}", "x", "n", "errors", "rate");
    for r in &res.rows {
        println!("{:>3} {:>8} {:>8} {:>10.5}", r.x, r.n, r.errors, r.error_rate);
    }
    let rep = error_report(&res.records, a.traces);
    write_error_artifacts(&run.out, &res.records, &rep, a.traces)?;
    if rep.total > 0 {
        for (class, pct) in &rep.percentages {
            println!("{:<17} {:6.2}%", class.name(), pct);
        }
    }
    report.insert("ood".into(), serde_json::to_value(&res.rows)?);
    report.insert("errors".into(), serde_json::to_value(&rep.percentages)?);
    report.insert(
        "histogram".into(),
        serde_json::to_value(
            rep.histogram
                .iter()
                .map(|(c, n)| (c.to_string(), *n))
                .collect::<std::collections::BTreeMap<_, _>>(),
        )?,
    );
    fs::write(run.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(a: OracleArgs) -> Result<ExitCode> {
    let run = RunConfig::resolve(a.common.config.as_deref(), &a.common.overrides())?;
    let base = run.episode_config();
    base.validate()?;
    let cap = base.budget_cap() as u64;
    let mut emit = match &a.emit {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let (mut mismatches, mut failures, mut max_gap, mut ops) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..a.episodes {
        let cfg = EpisodeConfig {
            seed: abacus_rl::ppo::substream(run.seed, "oracle", i),
            ..base.clone()
        };
        let r = run_oracle_episode(&cfg, a.max_ops);
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                eprintln!("episode {i}: {e}");
                failures += 1;
                continue;
            }
        };
        mismatches += r.checkpoints.iter().filter(|(p, t)| p != t).count() as u64;
        max_gap = max_gap.max(r.max_write_gap);
        ops += r.operations_completed;
        if let Some(w) = emit.as_mut() {
            for s in &r.trace {
                serde_json::to_writer(&mut *w, &serde_json::json!({"episode": i, "step": s}))?;
                writeln!(w)?;
            }
        }
    }
    if let Some(mut w) = emit {
        w.flush()?;
    }
    let equiv = mismatches == 0 && failures == 0;
    println!(
        "big-integer equivalence: {} ({} episodes, {} operations, {} mismatches, {} failed episodes)",
        if equiv { "pass" } else { "FAIL" },
        a.episodes,
        ops,
        mismatches,
        failures
    );
    println!(
        "budget: {} (cap {cap}, never exhausted; longest gap between writes {max_gap})",
        if failures == 0 { "pass" } else { "FAIL" }
    );
    Ok(if equiv { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_trace(a: TraceArgs) -> Result<ExitCode> {
    let ops = Operation::parse_list(&a.ops)?;
    let run = RunConfig::resolve(a.common.config.as_deref(), &a.common.overrides())?;
    let longest = ops.iter().map(|o| o.digits.len()).max().unwrap_or(1);
    let columns = a.common.columns.unwrap_or(run.episode.columns);
    let cfg = EpisodeConfig {
        columns,
        max_len: longest.min(columns).max(1),
        min_len: 1,
        reward: RewardConfig::preset(run.preset),
        ..EpisodeConfig::default()
    };
    let (mut policy, _) = make_policy(a.policy, a.ckpt.as_deref(), true, run.seed)?;
    let mut env = AbacusEnv::new(cfg)?;
    env.reset_scripted(ops.clone())?;

    let mut out: Box<dyn Write> = match &a.emit {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut prev: Option<Action> = None;
    let mut truth = num_bigint::BigUint::default();
    let mut summaries = Vec::new();
    let mut op_index = 0;
    let mut before = truth.clone();
    while !env.is_done() {
        let a = policy.act(&[&env], &[prev])?[0];
        let completed = env.operations_completed();
        let (res, tr) = step_traced(&mut env, a)?;
        serde_json::to_writer(&mut out, &tr)?;
        writeln!(out)?;
        prev = Some(a);
        let finished_op = res.info.operations_completed > completed;
        let failed = res.info.cause.is_some_and(|c| c.is_failure());
        if finished_op || failed {
            let op = &ops[op_index];
            truth = op.apply(&before)?;
            summaries.push(serde_json::json!({
                "S": to_base5(&before),
                "I": op.to_string(),
                "O": to_base5(&env.state().value()),
                "T": to_base5(&truth),
                "cause": res.info.cause,
            }));
            before = truth.clone();
            op_index += 1;
        }
    }
    out.flush()?;
    drop(out);
    for s in &summaries {
        eprintln!("{s}");
    }
    let cause = env.cause();
    eprintln!("final value {} ({:?})", to_base5(&env.state().value()), cause);
    Ok(if cause.is_some_and(|c| c.is_failure()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}
