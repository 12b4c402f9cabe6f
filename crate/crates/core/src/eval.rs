//! Accuracy, length generalization and error analysis.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abacus::{digits_to_value, value_to_digits, Action, Snapshot, BASE};
use crate::env::{step_traced, AbacusEnv, EpisodeConfig, Op, Operation, StepResult, Task, TerminationCause, TraceStep};
use crate::error::{Error, Result};
use crate::net::{Inputs, MaskedCategorical, NetParams};
use crate::oracle::{classify_failure, ErrorClass, FailureContext, Phase};
use crate::ppo::substream;

/// Something that picks actions for a batch of environments.
pub trait Policy {
    /// One action per environment. `prev` is each environment's previous
    /// action (`None` on the first step of an episode).
    fn act(&mut self, envs: &[&AbacusEnv], prev: &[Option<Action>]) -> Result<Vec<Action>>;

    /// Restarts any internal randomness.
    fn reseed(&mut self, _seed: u64) {}
}

/// Follows the oracle's prescription.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn act(&mut self, envs: &[&AbacusEnv], _prev: &[Option<Action>]) -> Result<Vec<Action>> {
        envs.iter().map(|e| Ok(e.prescription()?.action)).collect()
    }
}

/// Uniform over the legal actions.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, envs: &[&AbacusEnv], _prev: &[Option<Action>]) -> Result<Vec<Action>> {
        envs.iter()
            .map(|e| {
                let legal: Vec<Action> = e.mask().legal().collect();
                if legal.is_empty() {
                    return Err(Error::AllMasked);
                }
                Ok(legal[self.rng.random_range(0..legal.len())])
            })
            .collect()
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// The trained actor, greedy by default.
#[derive(Debug, Clone)]
pub struct NetPolicy {
    pub net: Arc<NetParams>,
    pub greedy: bool,
    rng: ChaCha8Rng,
}

impl NetPolicy {
    pub fn new(net: Arc<NetParams>, greedy: bool, seed: u64) -> Self {
        NetPolicy {
            net,
            greedy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for NetPolicy {
    fn act(&mut self, envs: &[&AbacusEnv], prev: &[Option<Action>]) -> Result<Vec<Action>> {
        let mut inp = Inputs::<f32>::with_capacity(envs.len());
        for (i, (e, p)) in envs.iter().zip(prev).enumerate() {
            inp.set_row(i, e.observation(), &e.symbol_input(), *p);
        }
        let logits = self.net.actor_logits(&inp);
        envs.iter()
            .enumerate()
            .map(|(i, e)| {
                let l: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
                let d = MaskedCategorical::new(&l, &e.mask())?;
                Ok(if self.greedy { d.argmax() } else { d.sample(&mut self.rng) })
            })
            .collect()
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// Environments stepped together so network policies act in batches.
const LOCKSTEP: usize = 32;

/// Result of driving one episode to its end.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub operations_completed: u64,
    pub cause: Option<TerminationCause>,
    pub steps: u64,
    pub total_reward: f64,
    /// Present when the episode failed or finished with a wrong value.
    pub error: Option<ErrorRecord>,
    /// Board value after each completed operation and the big-integer truth.
    pub checkpoints: Vec<(BigUint, BigUint)>,
}

struct Slot {
    env: AbacusEnv,
    prev: Option<Action>,
    trace: Vec<TraceStep>,
    truth: BigUint,
    outcome: EpisodeOutcome,
    op_index: usize,
    operands: Vec<String>,
    keep_trace: bool,
}

impl Slot {
    fn new(env: AbacusEnv, keep_trace: bool) -> Self {
        Slot {
            env,
            prev: None,
            trace: Vec::new(),
            truth: BigUint::zero(),
            outcome: EpisodeOutcome {
                operations_completed: 0,
                cause: None,
                steps: 0,
                total_reward: 0.0,
                error: None,
                checkpoints: Vec::new(),
            },
            op_index: 0,
            operands: Vec::new(),
            keep_trace,
        }
    }

    fn note_operation(&mut self) {
        if let Some(op) = self.env.current_operation() {
            if self.operands.len() == self.op_index {
                self.operands.push(op.to_string());
            }
        }
    }

    fn record(&mut self, a: Action) -> Result<StepResult> {
        let before_ops = self.env.operations_completed();
        let op = self.env.current_operation().cloned();
        let running = self.env.running_value().clone();
        let (res, tr) = step_traced(&mut self.env, a)?;
        if self.keep_trace {
            self.trace.push(tr);
        }
        self.prev = if res.done { None } else { Some(a) };
        self.outcome.steps += 1;
        self.outcome.total_reward += res.reward;
        if res.info.operations_completed > before_ops {
            let op = op.as_ref().expect("an operation was in progress");
            self.truth = op.apply(&self.truth)?;
            self.outcome.checkpoints.push((self.env.state().value(), self.truth.clone()));
            self.op_index += 1;
        }
        self.outcome.operations_completed = res.info.operations_completed;
        if res.done {
            self.outcome.cause = res.info.cause;
            if let Some(cause) = res.info.cause.filter(|c| c.is_failure()) {
                let op = op.expect("failures happen inside an operation");
                let phase = res.info.phase.unwrap_or(Phase::SubmitPending);
                let target = res.info.prescribed.map(|p| p.target).ok_or(Error::NotTerminal)?;
                let (class, column) = classify_failure(&FailureContext {
                    taken: a,
                    phase,
                    target,
                    cause,
                })?;
                let truth = op.apply(&running)?;
                self.outcome.error = Some(ErrorRecord {
                    class,
                    column,
                    operation_index: self.op_index,
                    operands: self.operands.clone(),
                    before: to_base5(&running),
                    snapshot: self.env.state().snapshot(),
                    produced: to_base5(&self.env.state().value()),
                    truth: to_base5(&truth),
                    cause: Some(cause),
                    taken: a.name().to_string(),
                    phase,
                    trace: std::mem::take(&mut self.trace),
                });
            } else if let Some((produced, truth)) = self.outcome.checkpoints.iter().find(|(p, t)| p != t) {
                // The env only accepts correct submits, so this is a defect
                // guard rather than an expected path.
                let col = first_divergent_column(produced, truth);
                self.outcome.error = Some(ErrorRecord {
                    class: ErrorClass::SimpleOperation,
                    column: col,
                    operation_index: self.op_index,
                    operands: self.operands.clone(),
                    before: to_base5(&running),
                    snapshot: self.env.state().snapshot(),
                    produced: to_base5(produced),
                    truth: to_base5(truth),
                    cause: res.info.cause,
                    taken: a.name().to_string(),
                    phase: res.info.phase.unwrap_or(Phase::SubmitPending),
                    trace: std::mem::take(&mut self.trace),
                });
            }
        }
        Ok(res)
    }
}

/// Steps every slot until all episodes finish.
fn run_lockstep<P: Policy + ?Sized>(policy: &mut P, slots: &mut [Slot]) -> Result<()> {
    loop {
        let live: Vec<usize> = (0..slots.len()).filter(|&i| !slots[i].env.is_done()).collect();
        if live.is_empty() {
            return Ok(());
        }
        for &i in &live {
            slots[i].note_operation();
        }
        let envs: Vec<&AbacusEnv> = live.iter().map(|&i| &slots[i].env).collect();
        let prev: Vec<Option<Action>> = live.iter().map(|&i| slots[i].prev).collect();
        let actions = policy.act(&envs, &prev)?;
        for (&i, a) in live.iter().zip(actions) {
            slots[i].record(a)?;
        }
    }
}

/// Aggregate accuracy over fresh episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub attempted: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub episodes: u64,
    pub max_consec_ops: u64,
    /// Operations completed in each episode, in order.
    pub per_episode_ops: Vec<u64>,
    pub per_episode_reward: Vec<f64>,
}

/// Runs fresh episodes until at least `n_operations` operations have been
/// attempted. An operation counts as attempted when it completes or when
/// the episode fails inside it. Without an operation limit in `cfg`, each
/// episode is capped at an even share of the operations still needed, so
/// a policy that never fails still terminates.
pub fn evaluate_accuracy<P: Policy + ?Sized>(policy: &mut P, cfg: &EpisodeConfig, n_operations: u64) -> Result<AccuracyReport> {
    if n_operations == 0 {
        return Err(Error::Config("evaluation needs at least one operation".into()));
    }
    cfg.validate()?;
    let mut rep = AccuracyReport {
        attempted: 0,
        correct: 0,
        accuracy: 0.0,
        episodes: 0,
        max_consec_ops: 0,
        per_episode_ops: Vec::new(),
        per_episode_reward: Vec::new(),
    };
    let mut next_episode = 0u64;
    while rep.attempted < n_operations {
        let mut slots = Vec::with_capacity(LOCKSTEP);
        let share = (n_operations - rep.attempted).div_ceil(LOCKSTEP as u64);
        for _ in 0..LOCKSTEP {
            let mut env = AbacusEnv::new(EpisodeConfig {
                seed: substream(cfg.seed, "eval", next_episode),
                max_operations: cfg.max_operations.or(Some(share)),
                ..cfg.clone()
            })?;
            env.reset();
            next_episode += 1;
            slots.push(Slot::new(env, false));
        }
        run_lockstep(policy, &mut slots)?;
        for s in slots {
            if rep.attempted >= n_operations {
                break;
            }
            let o = &s.outcome;
            let good = o.checkpoints.iter().filter(|(p, t)| p == t).count() as u64;
            let failed = o.cause.is_some_and(TerminationCause::is_failure);
            rep.correct += good;
            rep.attempted += o.operations_completed + u64::from(failed);
            rep.episodes += 1;
            rep.max_consec_ops = rep.max_consec_ops.max(o.operations_completed);
            rep.per_episode_ops.push(o.operations_completed);
            rep.per_episode_reward.push(o.total_reward);
        }
    }
    rep.accuracy = rep.correct as f64 / rep.attempted as f64;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OODConfig {
    pub xs: Vec<u32>,
    pub samples: usize,
    pub columns: usize,
    pub greedy: bool,
    pub seed: u64,
}

impl Default for OODConfig {
    fn default() -> Self {
        OODConfig {
            xs: vec![1, 2, 4, 8, 16],
            samples: 10_000,
            columns: 20,
            greedy: true,
            seed: 0,
        }
    }
}

impl OODConfig {
    /// Every interval must leave room for the carry out of a sum.
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("at least one sample per interval".into()));
        }
        if self.xs.is_empty() {
            return Err(Error::Config("no intervals".into()));
        }
        for &x in &self.xs {
            if x == 0 {
                return Err(Error::Config("interval exponents start at 1".into()));
            }
            if x as usize + 1 > self.columns {
                return Err(Error::Config(format!(
                    "operands below 5^{x} can sum to {} digits, more than {} columns",
                    x + 1,
                    self.columns
                )));
            }
        }
        Ok(())
    }
}

/// Uniform draw from [5^(x-1), 5^x): leading digit 1..=4, the rest 0..=4.
pub fn sample_interval<R: Rng>(rng: &mut R, x: u32) -> BigUint {
    let mut digits: Vec<u8> = (0..x - 1).map(|_| rng.random_range(0..BASE)).collect();
    digits.push(rng.random_range(1..BASE));
    digits_to_value(&digits)
}

pub fn interval_bounds(x: u32) -> (BigUint, BigUint) {
    let five = BigUint::from(BASE as u32);
    (five.pow(x - 1), five.pow(x))
}

/// The two operations of one sweep sample.
pub fn ood_operations<R: Rng>(rng: &mut R, x: u32) -> (Operation, Operation) {
    let a = sample_interval(rng, x);
    let b = sample_interval(rng, x);
    let op = if rng.random_bool(0.5) { Op::Add } else { Op::Sub };
    let (a, b) = if op == Op::Sub && b > a { (b, a) } else { (a, b) };
    (Operation::from_value(Op::Add, &a), Operation::from_value(op, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OODRow {
    pub x: u32,
    pub lo: String,
    pub hi: String,
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone)]
pub struct OODResult {
    pub rows: Vec<OODRow>,
    pub records: Vec<ErrorRecord>,
}

/// Per interval: `samples` episodes of `+A` then `±B` from zero.
pub fn ood_sweep<P: Policy + ?Sized>(policy: &mut P, ood: &OODConfig) -> Result<OODResult> {
    ood.validate()?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &x in &ood.xs {
        let (lo, hi) = interval_bounds(x);
        let mut errors = 0;
        let mut done = 0;
        while done < ood.samples {
            let n = LOCKSTEP.min(ood.samples - done);
            let mut slots = Vec::with_capacity(n);
            for i in done..done + n {
                let mut rng = ChaCha8Rng::seed_from_u64(substream(ood.seed, "ood", ((x as u64) << 40) | i as u64));
                let (first, second) = ood_operations(&mut rng, x);
                let mut env = AbacusEnv::new(EpisodeConfig {
                    columns: ood.columns,
                    max_len: ood.columns,
                    task: Task::Both,
                    ..EpisodeConfig::default()
                })?;
                env.reset_scripted(vec![first, second])?;
                slots.push(Slot::new(env, true));
            }
            policy.reseed(substream(ood.seed, "ood-policy", ((x as u64) << 40) | done as u64));
            run_lockstep(policy, &mut slots)?;
            for s in slots {
                let o = s.outcome;
                let ok = o.cause == Some(TerminationCause::Completed)
                    && o.operations_completed == 2
                    && o.checkpoints.iter().all(|(p, t)| p == t);
                if !ok {
                    errors += 1;
                    if let Some(e) = o.error {
                        records.push(e);
                    }
                }
            }
            done += n;
        }
        rows.push(OODRow {
            x,
            lo: lo.to_string(),
            hi: hi.to_string(),
            n: ood.samples,
            errors,
            error_rate: errors as f64 / ood.samples as f64,
        });
    }
    Ok(OODResult { rows, records })
}

pub fn write_ood_csv(path: &Path, rows: &[OODRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,lo,hi,n,errors,error_rate")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.x, r.lo, r.hi, r.n, r.errors, r.error_rate)?;
    }
    w.flush()?;
    Ok(())
}

/// One failed operation, with enough context to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub class: ErrorClass,
    /// Oracle target column at the failing step.
    pub column: usize,
    pub operation_index: usize,
    /// Operations seen so far in the episode, e.g. `+1234`.
    pub operands: Vec<String>,
    /// Running value before the failing operation, base 5.
    pub before: String,
    pub snapshot: Snapshot,
    pub produced: String,
    pub truth: String,
    pub cause: Option<TerminationCause>,
    pub taken: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceStep>,
}

pub fn to_base5(v: &BigUint) -> String {
    let d = value_to_digits(v);
    if d.is_empty() {
        return "0".into();
    }
    d.iter().rev().map(|x| char::from(b'0' + x)).collect()
}

/// Lowest column where the two values differ.
pub fn first_divergent_column(a: &BigUint, b: &BigUint) -> usize {
    let (da, db) = (value_to_digits(a), value_to_digits(b));
    let n = da.len().max(db.len());
    (0..n)
        .find(|&i| da.get(i).copied().unwrap_or(0) != db.get(i).copied().unwrap_or(0))
        .unwrap_or(0)
}

/// Marks the digit at `column` (0 = least significant) with brackets.
pub fn highlight_column(base5: &str, column: usize) -> String {
    let n = base5.len();
    if column >= n {
        return base5.to_string();
    }
    let at = n - 1 - column;
    format!("{}[{}]{}", &base5[..at], &base5[at..at + 1], &base5[at + 1..])
}

/// State / input / output / target summary of one failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    #[serde(rename = "S")]
    pub s: String,
    #[serde(rename = "I")]
    pub i: String,
    #[serde(rename = "O")]
    pub o: String,
    #[serde(rename = "T")]
    pub t: String,
    pub divergent_column: usize,
    pub class: ErrorClass,
    pub cause: Option<TerminationCause>,
}

impl ErrorRecord {
    pub fn summary(&self) -> TraceSummary {
        let parse = |s: &str| -> BigUint {
            let digits: Vec<u8> = s.bytes().rev().map(|b| b - b'0').collect();
            digits_to_value(&digits)
        };
        let col = first_divergent_column(&parse(&self.produced), &parse(&self.truth));
        TraceSummary {
            s: self.before.clone(),
            i: self.operands.get(self.operation_index).cloned().unwrap_or_default(),
            o: highlight_column(&self.produced, col),
            t: highlight_column(&self.truth, col),
            divergent_column: col,
            class: self.class,
            cause: self.cause,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub total: u64,
    pub counts: BTreeMap<ErrorClass, u64>,
    /// Percent of all errors per class.
    pub percentages: BTreeMap<ErrorClass, f64>,
    /// Error count per oracle target column.
    pub histogram: BTreeMap<usize, u64>,
    /// Error count per (class, column).
    pub cells: BTreeMap<(ErrorClass, usize), u64>,
    pub examples: Vec<TraceSummary>,
}

pub fn error_report(records: &[ErrorRecord], examples: usize) -> ErrorReport {
    let mut counts = BTreeMap::new();
    let mut histogram = BTreeMap::new();
    let mut cells = BTreeMap::new();
    for r in records {
        *counts.entry(r.class).or_insert(0) += 1;
        *histogram.entry(r.column).or_insert(0) += 1;
        *cells.entry((r.class, r.column)).or_insert(0) += 1;
    }
    let total = records.len() as u64;
    let percentages = ErrorClass::ALL
        .iter()
        .map(|c| {
            let n = counts.get(c).copied().unwrap_or(0);
            (*c, if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 })
        })
        .collect();
    ErrorReport {
        total,
        counts,
        percentages,
        histogram,
        cells,
        examples: records.iter().take(examples).map(ErrorRecord::summary).collect(),
    }
}

/// Writes `errors.csv` and one `traces/NNNNNN.jsonl` per record (summary
/// line first, then the per-step trace), up to `max_traces` files.
pub fn write_error_artifacts(dir: &Path, records: &[ErrorRecord], report: &ErrorReport, max_traces: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("errors.csv"))?);
    writeln!(w, "class,column,count")?;
    for ((class, col), n) in &report.cells {
        writeln!(w, "{},{},{}", class.name(), col, n)?;
    }
    w.flush()?;
    let tdir = dir.join("traces");
    fs::create_dir_all(&tdir)?;
    for (i, r) in records.iter().take(max_traces).enumerate() {
        let mut w = BufWriter::new(File::create(tdir.join(format!("{i:06}.jsonl")))?);
        serde_json::to_writer(&mut w, &r.summary())?;
        writeln!(w)?;
        for s in &r.trace {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Drives the oracle through a sampled episode and deviates at the first
/// step where a failure of `class` can be provoked, returning the
/// resulting record. `None` if the episode never offers such a step.
pub fn inject_failure(cfg: &EpisodeConfig, class: ErrorClass) -> Result<Option<ErrorRecord>> {
    let mut env = AbacusEnv::new(cfg.clone())?;
    env.reset();
    let mut slot = Slot::new(env, true);
    while !slot.env.is_done() {
        slot.note_operation();
        let p = slot.env.prescription()?;
        let mask = slot.env.mask();
        let deviate = match class {
            ErrorClass::SimpleOperation => (p.phase == Phase::WriteDigit).then_some(Action::Submit),
            ErrorClass::Carry => (p.phase == Phase::CarryWrite).then_some(Action::Submit),
            ErrorClass::SignpostRight => {
                (p.action != Action::SignpostRight && mask.allows(Action::SignpostRight)).then_some(Action::SignpostRight)
            }
            ErrorClass::SignpostLeft => {
                (p.action != Action::SignpostLeft && mask.allows(Action::SignpostLeft)).then_some(Action::SignpostLeft)
            }
        };
        match deviate {
            Some(a) => {
                slot.record(a)?;
                return Ok(slot.outcome.error);
            }
            None => {
                slot.record(p.action)?;
            }
        }
    }
    Ok(None)
}
